//! Argument parsing and the subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use detgen::eval::emit_report;
use detgen::hiercodec::{presets, HierarchySpec, NamedLabel, TokenSeq};
use detgen::scenegen::{generate_dataset, DatasetConfig};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_arch, Proposals, Protocol, RunConfig, Split};
use crate::pipeline::{self, Dataset, Models, SweepAxis};

#[derive(Debug, Parser)]
#[command(
    name = "detgen",
    version,
    about = "Detection to hierarchical label generation on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData(Common),
    /// Train the Q-Former and generator on ground-truth boxes.
    Train(TrainArgs),
    /// Train the detector head.
    TrainDetector(TrainArgs),
    /// Evaluate a checkpoint under the gtbox or e2e protocol.
    Eval(Common),
    /// Detect and label the objects of one PPM image.
    Infer(InferArgs),
    /// Map a label to tokens or back.
    Codec(CodecArgs),
    /// Retrain and evaluate over ROI sizes or query token counts.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Gtbox,
    E2e,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProposalsArg {
    Detector,
    GroundTruth,
}

/// Flags shared by every pipeline command. Each one overrides the
/// corresponding config value.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run config; defaults apply to absent fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path (dataset directory, checkpoint or report).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Input checkpoint; also the config base when --config is absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator architecture: encdec or declonly.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub roi_size: Option<usize>,
    #[arg(long)]
    pub query_tokens: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub topm: Option<usize>,
    /// Property decoded on its own (property-conditioned decoding).
    #[arg(long)]
    pub property: Option<String>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// mAP matching threshold [config default: 0.85].
    #[arg(long)]
    pub iou_thresh: Option<f64>,
    /// NMS threshold [config default: 0.5].
    #[arg(long)]
    pub nms_thresh: Option<f32>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Proposal source for the e2e protocol.
    #[arg(long, value_enum)]
    pub proposals: Option<ProposalsArg>,
    /// Training epochs of the model the command trains.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of scenes for gen-data.
    #[arg(long)]
    pub scenes: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Save after this many completed epochs instead of the configured total.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// PPM image.
    pub image: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CodecAction {
    Encode,
    Decode,
}

#[derive(Debug, Clone, Args)]
pub struct CodecArgs {
    pub action: CodecAction,
    /// Hierarchy JSON path, or a preset: toy, tiny, mscoco, objects365, products7417.
    #[arg(long)]
    pub tree: String,
    /// Label as JSON: {"category": [a, b, c], "property": p, "value": v}.
    #[arg(long)]
    pub label: Option<String>,
    /// Comma-separated token ids.
    #[arg(long)]
    pub tokens: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    #[value(name = "roi_size", alias = "roi-size")]
    RoiSize,
    #[value(name = "query_tokens", alias = "query-tokens")]
    QueryTokens,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Comma-separated settings, e.g. 1,5,7.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<usize>,
}

/// Config from --config, else the checkpoint's echo, else defaults, with
/// flags applied on top.
pub fn resolve_config(c: &Common, ckpt: Option<&Checkpoint>) -> Result<RunConfig> {
    let mut cfg = match (&c.config, ckpt) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(k)) => k.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.data {
        cfg.data = d.clone();
    }
    if let Some(a) = &c.arch {
        cfg.model.architecture = parse_arch(a)?;
    }
    if let Some(r) = c.roi_size {
        cfg.model.roi_size = r;
    }
    if let Some(q) = c.query_tokens {
        cfg.model.query_tokens = q;
    }
    let p = &mut cfg.protocol;
    if let Some(b) = c.beam {
        p.beam = b;
    }
    if let Some(m) = c.topm {
        p.topm = m;
    }
    if let Some(prop) = &c.property {
        p.property = Some(prop.clone());
    }
    if let Some(pr) = c.protocol {
        p.protocol = match pr {
            ProtocolArg::Gtbox => Protocol::Gtbox,
            ProtocolArg::E2e => Protocol::E2e,
        };
    }
    if let Some(t) = c.iou_thresh {
        p.iou_thresh = t;
    }
    if let Some(t) = c.nms_thresh {
        p.nms_thresh = t;
    }
    if let Some(s) = c.split {
        p.split = match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        };
    }
    if let Some(s) = c.proposals {
        p.proposals = match s {
            ProposalsArg::Detector => Proposals::Detector,
            ProposalsArg::GroundTruth => Proposals::GroundTruth,
        };
    }
    if let Some(n) = c.scenes {
        cfg.dataset.scenes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_ckpt(c: &Common) -> Result<Option<Checkpoint>> {
    c.ckpt
        .as_ref()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()
}

fn require_out(c: &Common, what: &str) -> Result<PathBuf> {
    c.out.clone().with_context(|| format!("--out is required ({what})"))
}

/// Writes `text` to `path`, or stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    pipeline::init_threads()?;
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::Train(a) => train(&a, false),
        Command::TrainDetector(a) => train(&a, true),
        Command::Eval(c) => eval(&c),
        Command::Infer(a) => infer(&a),
        Command::Codec(a) => codec(&a),
        Command::Sweep(a) => sweep(&a),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let mut cfg = resolve_config(c, None)?;
    if let Some(s) = c.seed {
        cfg.dataset.seed = s;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.data.clone());
    let paths = generate_dataset(&cfg.dataset, &out)?;
    let train = cfg.dataset.train_count();
    eprintln!(
        "wrote {} scenes ({} train, {} test) to {}",
        cfg.dataset.scenes,
        train,
        cfg.dataset.scenes - train,
        paths.root.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, detector: bool) -> Result<()> {
    let c = &a.common;
    let out = require_out(c, "checkpoint path")?;
    let base = load_ckpt(c)?;
    let mut cfg = resolve_config(c, base.as_ref())?;
    if let Some(e) = c.epochs {
        if detector {
            cfg.detector.optim.epochs = e;
        } else {
            cfg.optim.epochs = e;
        }
    }
    let data = Dataset::load(&cfg)?;
    let log = |e: usize, l: f32| eprintln!("epoch {e} loss {l:.6}");
    let ckpt = if detector {
        pipeline::train_detector(&cfg, &data, base, a.stop_after, log)?
    } else {
        pipeline::train_semantic(&cfg, &data, base, a.stop_after, log)?
    };
    ckpt.save(&out)?;
    eprintln!("saved {}", out.display());
    Ok(())
}

/// Restores the checkpoint's models and applies the resolved protocol
/// and dataset settings.
fn models_for(c: &Common) -> Result<Models> {
    let ckpt = load_ckpt(c)?.context("--ckpt is required")?;
    let cfg = resolve_config(c, Some(&ckpt))?;
    let mut models = Models::from_checkpoint(&ckpt)?;
    models.config.protocol = cfg.protocol;
    models.config.data = cfg.data;
    models.config.hierarchy = cfg.hierarchy;
    Ok(models)
}

fn eval(c: &Common) -> Result<()> {
    let models = models_for(c)?;
    let data = Dataset::load(&models.config)?;
    let report = pipeline::evaluate(&models, &data)?;
    if let Some(p) = &c.out {
        emit_report(&report, p)?;
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(None, &text)
}

fn infer(a: &InferArgs) -> Result<()> {
    let models = models_for(&a.common)?;
    let objects = pipeline::infer(&models, &a.image)?;
    let mut text = String::new();
    for o in &objects {
        text.push_str(&serde_json::to_string(o)?);
        text.push('\n');
    }
    emit(a.common.out.as_deref(), &text)
}

/// Hierarchy from a path or preset name.
pub fn load_tree_spec(tree: &str) -> Result<HierarchySpec> {
    let path = Path::new(tree);
    if path.exists() {
        return Ok(HierarchySpec::load(path)?);
    }
    Ok(match tree {
        "toy" => DatasetConfig::default().hierarchy()?,
        "tiny" => presets::tiny_spec(),
        name => match presets::by_name(name) {
            Some(g) => presets::geometry_spec(g)?,
            None => bail!("{tree:?} is neither a hierarchy file nor a preset"),
        },
    })
}

fn codec(a: &CodecArgs) -> Result<()> {
    let tree = load_tree_spec(&a.tree)?.build()?;
    let line = match a.action {
        CodecAction::Encode => {
            let text = a.label.as_deref().context("encode needs --label")?;
            let named: NamedLabel = serde_json::from_str(text).context("--label is not a label document")?;
            let label = tree.resolve(&named)?;
            let seq = tree.encode_label(&label)?;
            let ids = seq.tokens().iter().map(u32::to_string).collect::<Vec<_>>().join(",");
            format!(
                "{{\"tokens\":[{ids}],\"path\":[{},{},{}],\"property\":{},\"value\":{}}}\n",
                label.path[0], label.path[1], label.path[2], label.property, label.value
            )
        }
        CodecAction::Decode => {
            let text = a.tokens.as_deref().context("decode needs --tokens")?;
            let tokens = text
                .split(',')
                .map(|t| t.trim().parse::<u32>().with_context(|| format!("bad token {t:?}")))
                .collect::<Result<Vec<_>>>()?;
            let label = tree.decode_tokens(&TokenSeq::from_raw(tokens))?;
            let mut s = serde_json::to_string(&tree.name(&label)?)?;
            s.push('\n');
            s
        }
    };
    emit(None, &line)
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let c = &a.common;
    let mut cfg = resolve_config(c, None)?;
    if let Some(e) = c.epochs {
        cfg.optim.epochs = e;
    }
    ensure!(a.values.iter().all(|&v| v > 0), "sweep values must be positive");
    let data = Dataset::load(&cfg)?;
    let axis = match a.axis {
        AxisArg::RoiSize => SweepAxis::RoiSize,
        AxisArg::QueryTokens => SweepAxis::QueryTokens,
    };
    let rows = pipeline::sweep(&cfg, &data, axis, &a.values, |m| eprintln!("{m}"))?;
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let json = serde_json::to_string_pretty(&rows)? + "\n";
        emit(Some(&dir.join("sweep.json")), &json)?;
        emit(Some(&dir.join("sweep.md")), &pipeline::sweep_table(&rows))?;
    }
    emit(None, &pipeline::sweep_table(&rows))
}
