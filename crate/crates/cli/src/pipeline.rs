//! Training and evaluation pipelines over an on-disk dataset.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use detgen::detect::{Detector, DetectorSample, ProposalSource};
use detgen::eval::{
    attribute_accuracy, mean_average_precision, AttributePrediction, ClassifiedDetection, EvalReport, GroundTruthBox,
};
use detgen::generator::{
    beam_search, property_conditioned_decode, ConditionedOutcome, Generator, ObjectScorer, SemanticModel, TrainItem,
};
use detgen::hiercodec::{HierarchySpec, HierarchyTree, Label, TokenSeq};
use detgen::scenegen::{load_manifest, DatasetPaths, Image, SceneRecord};
use detgen::tensor::{Adam, ParamStore};
use detgen::vision::{roi_align, BBox, Backbone, FeatureMap, QFormer, RoiFeature};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Component};
use crate::config::{Proposals, Protocol, RunConfig, Split};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "UNIDGF_THREADS";

/// Sizes the global worker pool from `UNIDGF_THREADS` when set. Results
/// never depend on the worker count.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v:?} is not a count"))?;
        ensure!(n > 0, "{THREADS_ENV} must be positive");
        // A pool built earlier in the process (tests) is left as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// A generated dataset read back from disk.
pub struct Dataset {
    pub root: PathBuf,
    pub spec: HierarchySpec,
    pub tree: HierarchyTree,
    pub train: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let paths = DatasetPaths::new(&cfg.data);
        ensure!(
            paths.train.exists(),
            "dataset {} has no train.jsonl (run gen-data)",
            cfg.data.display()
        );
        let spec = cfg.load_hierarchy()?;
        let tree = spec.build()?;
        let train = load_manifest(&paths.train, &tree)?;
        let test = load_manifest(&paths.test, &tree)?;
        Ok(Self {
            root: cfg.data.clone(),
            spec,
            tree,
            train,
            test,
        })
    }

    /// The first `limit` scenes of `split`.
    pub fn scenes(&self, split: Split, limit: Option<usize>) -> &[SceneRecord] {
        let all = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        &all[..limit.unwrap_or(all.len()).min(all.len())]
    }

    pub fn image(&self, rec: &SceneRecord) -> Result<Image> {
        Ok(Image::read_ppm(&self.root.join(&rec.image))?)
    }
}

/// Pooled region and supervision of one ground-truth object.
pub struct ObjectSample {
    pub roi: RoiFeature,
    pub sequences: Vec<TokenSeq>,
    pub path: [u32; 3],
    pub labels: Vec<Label>,
}

pub fn backbone(cfg: &RunConfig) -> Backbone {
    Backbone::new(cfg.backbone)
}

/// Regions of every ground-truth object, in scene then object order.
pub fn object_samples(
    cfg: &RunConfig,
    bb: &Backbone,
    data: &Dataset,
    scenes: &[SceneRecord],
) -> Result<Vec<ObjectSample>> {
    let m = cfg.model;
    let per_scene = scenes
        .par_iter()
        .map(|rec| -> Result<Vec<ObjectSample>> {
            let img = data.image(rec)?;
            let f = bb.forward_stages(&img)?.swap_remove(m.roi_stage);
            rec.objects
                .iter()
                .map(|o| {
                    let labels = o.labels(&data.tree)?;
                    let sequences = labels
                        .iter()
                        .map(|l| data.tree.encode_label(l))
                        .collect::<Result<_, _>>()?;
                    Ok(ObjectSample {
                        roi: roi_align(&f, &o.bbox, m.roi_size, m.sampling)?,
                        sequences,
                        path: o.path(&data.tree)?,
                        labels,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Fresh Q-Former and generator on their own store, initialized from the
/// run seed.
pub fn build_semantic(cfg: &RunConfig, tree: &HierarchyTree) -> Result<(SemanticModel, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let feat_dim = cfg.backbone.channels[cfg.model.roi_stage];
    let qformer = QFormer::new(&mut store, "qformer", cfg.model.qformer(feat_dim), &mut rng)?;
    let generator = Generator::new(
        &mut store,
        "generator",
        cfg.model.generator(tree.vocab_size()),
        &mut rng,
    )?;
    Ok((SemanticModel { qformer, generator }, store))
}

fn stage_shape(cfg: &RunConfig) -> (Vec<usize>, Vec<usize>) {
    let dims = cfg.backbone.channels.to_vec();
    let strides = (0..dims.len()).map(|i| 2 << i).collect();
    (dims, strides)
}

pub fn build_detector(cfg: &RunConfig) -> Result<(Detector, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut store = ParamStore::new();
    let (dims, strides) = stage_shape(cfg);
    let det = Detector::new(&mut store, cfg.detector.model, &dims, &strides, &mut rng)?;
    Ok((det, store))
}

/// Per-epoch generator for shuffling (and detector jitter); `lane`
/// separates the semantic and detector runs.
fn epoch_rng(seed: u64, lane: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + lane);
    rng
}

/// Base checkpoint for a run: the given one, or an empty one echoing `cfg`.
fn base_checkpoint(cfg: &RunConfig, data: &Dataset, base: Option<Checkpoint>) -> Result<Checkpoint> {
    match base {
        Some(c) => {
            ensure!(
                c.hierarchy == data.spec,
                "checkpoint hierarchy differs from the dataset's"
            );
            Ok(Checkpoint {
                config: cfg.clone(),
                ..c
            })
        }
        None => Ok(Checkpoint {
            config: cfg.clone(),
            hierarchy: data.spec.clone(),
            semantic: None,
            detector: None,
        }),
    }
}

/// Trains the Q-Former and generator on ground-truth boxes. Resumes from
/// `base`'s semantic component when present; stops after epoch
/// `stop_after` (exclusive count) when given. `log` sees each epoch's mean
/// loss.
pub fn train_semantic(
    cfg: &RunConfig,
    data: &Dataset,
    base: Option<Checkpoint>,
    stop_after: Option<usize>,
    mut log: impl FnMut(usize, f32),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ckpt = base_checkpoint(cfg, data, base)?;
    let (model, mut store) = build_semantic(cfg, &data.tree)?;
    let (mut adam, start) = match &ckpt.semantic {
        Some(c) => {
            let adam = c.restore(&mut store, "semantic")?;
            (
                adam.unwrap_or_else(|| Adam::new(&store, cfg.optim.adam())),
                c.epochs_done,
            )
        }
        None => (Adam::new(&store, cfg.optim.adam()), 0),
    };
    let o = cfg.optim;
    let end = stop_after.unwrap_or(o.epochs).min(o.epochs);
    if start < end {
        let bb = backbone(cfg);
        let samples = object_samples(cfg, &bb, data, data.scenes(Split::Train, o.train_scenes))?;
        ensure!(!samples.is_empty(), "no training objects");
        for epoch in start..end {
            adam.set_lr(o.lr_at(epoch as f32 / o.epochs as f32));
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut epoch_rng(cfg.seed, 0, epoch));
            let (mut total, mut steps) = (0.0f64, 0usize);
            for chunk in order.chunks(o.batch) {
                let items: Vec<TrainItem<'_>> = chunk
                    .iter()
                    .map(|&i| TrainItem {
                        roi: &samples[i].roi,
                        sequences: &samples[i].sequences,
                    })
                    .collect();
                total += f64::from(model.train_step(&mut store, &mut adam, &items)?);
                steps += 1;
            }
            log(epoch, (total / steps as f64) as f32);
        }
    }
    ckpt.semantic = Some(Component::capture(&store, Some(&adam), end.max(start)));
    Ok(ckpt)
}

/// Keeps the stages the detector reads; the rest become empty maps.
fn detector_stages(cfg: &RunConfig, stages: Vec<FeatureMap>) -> Vec<FeatureMap> {
    let used = [cfg.detector.model.grid_stage, cfg.detector.model.refine_stage];
    stages
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            if used.contains(&i) {
                f
            } else {
                FeatureMap::new(0, 0, f.dim, f.stride, Vec::new())
            }
        })
        .collect()
}

/// Trains the detector head on its own store; see [`train_semantic`].
pub fn train_detector(
    cfg: &RunConfig,
    data: &Dataset,
    base: Option<Checkpoint>,
    stop_after: Option<usize>,
    mut log: impl FnMut(usize, f32),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ckpt = base_checkpoint(cfg, data, base)?;
    let (det, mut store) = build_detector(cfg)?;
    let o = cfg.detector.optim;
    let (mut adam, start) = match &ckpt.detector {
        Some(c) => {
            let adam = c.restore(&mut store, "detector")?;
            (adam.unwrap_or_else(|| Adam::new(&store, o.adam())), c.epochs_done)
        }
        None => (Adam::new(&store, o.adam()), 0),
    };
    let end = stop_after.unwrap_or(o.epochs).min(o.epochs);
    if start < end {
        let bb = backbone(cfg);
        let scenes = data.scenes(Split::Train, o.train_scenes);
        let feats = scenes
            .par_iter()
            .map(|rec| -> Result<(Vec<FeatureMap>, Vec<BBox>)> {
                let stages = bb.forward_stages(&data.image(rec)?)?;
                Ok((
                    detector_stages(cfg, stages),
                    rec.objects.iter().map(|o| o.bbox).collect(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        for epoch in start..end {
            adam.set_lr(o.lr_at(epoch as f32 / o.epochs as f32));
            let mut rng = epoch_rng(cfg.seed, 1, epoch);
            let mut order: Vec<usize> = (0..feats.len()).collect();
            order.shuffle(&mut rng);
            let (mut total, mut steps) = (0.0f64, 0usize);
            for chunk in order.chunks(o.batch) {
                let samples: Vec<DetectorSample<'_>> = chunk
                    .iter()
                    .map(|&i| DetectorSample {
                        stages: &feats[i].0,
                        boxes: &feats[i].1,
                    })
                    .collect();
                total += f64::from(det.train_step(&mut store, &mut adam, &samples, &mut rng)?.total());
                steps += 1;
            }
            log(epoch, (total / steps as f64) as f32);
        }
    }
    ckpt.detector = Some(Component::capture(&store, Some(&adam), end.max(start)));
    Ok(ckpt)
}

/// Models restored from a checkpoint for inference.
pub struct Models {
    pub config: RunConfig,
    pub tree: HierarchyTree,
    pub backbone: Backbone,
    pub semantic: SemanticModel,
    pub semantic_store: ParamStore,
    pub detector: Option<(Detector, ParamStore)>,
}

impl Models {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = &ckpt.config;
        let tree = ckpt.hierarchy.build()?;
        let (semantic, mut semantic_store) = build_semantic(cfg, &tree)?;
        ckpt.semantic()?.restore(&mut semantic_store, "semantic")?;
        let detector = match &ckpt.detector {
            Some(c) => {
                let (det, mut store) = build_detector(cfg)?;
                c.restore(&mut store, "detector")?;
                Some((det, store))
            }
            None => None,
        };
        semantic_store.reset_read_counts();
        Ok(Self {
            config: cfg.clone(),
            tree,
            backbone: backbone(cfg),
            semantic,
            semantic_store,
            detector,
        })
    }

    /// Parameter reads performed by the detector head so far.
    pub fn detector_reads(&self) -> u64 {
        self.detector.as_ref().map_or(0, |(_, s)| s.reads_with_prefix(""))
    }

    fn scorer<'a>(&'a self, ctx: &'a detgen::generator::Context<detgen::tensor::Tensor>) -> ObjectScorer<'a> {
        ObjectScorer {
            generator: &self.semantic.generator,
            store: &self.semantic_store,
            context: ctx,
        }
    }

    fn pool(&self, stages: &[FeatureMap], boxes: &[BBox]) -> Result<Vec<RoiFeature>> {
        let m = self.config.model;
        boxes
            .iter()
            .map(|b| Ok(roi_align(&stages[m.roi_stage], b, m.roi_size, m.sampling)?))
            .collect()
    }
}

/// Regions per semantic forward pass at inference.
const INFER_BATCH: usize = 64;

/// Objects of `samples` decoded top-1 (category) and property-conditioned
/// for every ground-truth property.
fn decode_gtbox(
    models: &Models,
    samples: &[ObjectSample],
    beam: usize,
) -> Result<Vec<([u32; 3], Vec<AttributePrediction>)>> {
    let chunks = samples
        .par_chunks(INFER_BATCH)
        .map(|chunk| -> Result<Vec<_>> {
            let rois: Vec<&RoiFeature> = chunk.iter().map(|s| &s.roi).collect();
            let ctxs = models.semantic.contexts(&models.semantic_store, &rois)?;
            ctxs.iter()
                .zip(chunk)
                .map(|(ctx, s)| {
                    let sc = models.scorer(ctx);
                    let best = beam_search(&sc, &models.tree, beam, 1)?.remove(0);
                    let path = models.tree.decode_tokens(&best.into_seq())?.path;
                    let attrs = s
                        .labels
                        .iter()
                        .map(|l| {
                            let out = property_conditioned_decode(&sc, &models.tree, l.property, beam)?;
                            Ok(AttributePrediction {
                                property: l.property,
                                value: match out {
                                    ConditionedOutcome::Value { value, .. } => Some(value),
                                    ConditionedOutcome::NoAttribute { .. } => None,
                                },
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((path, attrs))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn class_key(tree: &HierarchyTree, path: [u32; 3]) -> Result<String> {
    Ok(tree.path_names(path)?.join(" > "))
}

/// Runs the configured protocol on the configured split.
pub fn evaluate(models: &Models, data: &Dataset) -> Result<EvalReport> {
    let cfg = &models.config;
    let p = &cfg.protocol;
    let spec = models.tree.spec();
    if *spec != data.spec {
        bail!(
            "checkpoint hierarchy is incompatible with the dataset at {}",
            data.root.display()
        );
    }
    let scenes = data.scenes(p.split, p.eval_scenes);
    let mut report = EvalReport::empty(serde_json::to_value(cfg).expect("config serializes"));
    match p.protocol {
        Protocol::Gtbox => {
            let samples = object_samples(cfg, &models.backbone, data, scenes)?;
            let decoded = decode_gtbox(models, &samples, p.beam)?;
            let preds: Vec<[u32; 3]> = decoded.iter().map(|d| d.0).collect();
            let truths: Vec<[u32; 3]> = samples.iter().map(|s| s.path).collect();
            report.set_category(&preds, &truths)?;
            let attr_preds: Vec<Vec<AttributePrediction>> = decoded.into_iter().map(|d| d.1).collect();
            let attr_truths: Vec<Vec<(u32, u32)>> = samples
                .iter()
                .map(|s| s.labels.iter().map(|l| (l.property, l.value)).collect())
                .collect();
            report.set_attributes(attribute_accuracy(&attr_preds, &attr_truths)?);
        }
        Protocol::E2e => {
            let source = match p.proposals {
                Proposals::GroundTruth => ProposalSource::GroundTruth,
                Proposals::Detector => {
                    let Some((det, store)) = &models.detector else {
                        bail!("the e2e protocol needs a checkpoint with a trained detector (run train-detector)");
                    };
                    ProposalSource::Model {
                        detector: det,
                        store,
                        nms_threshold: p.nms_thresh,
                    }
                }
            };
            let per_scene = scenes
                .par_iter()
                .enumerate()
                .map(|(i, rec)| -> Result<(Vec<ClassifiedDetection>, Vec<GroundTruthBox>)> {
                    let gt: Vec<BBox> = rec.objects.iter().map(|o| o.bbox).collect();
                    let stages = models.backbone.forward_stages(&data.image(rec)?)?;
                    let props = source.propose(&gt, i as u64, &stages)?;
                    let boxes: Vec<BBox> = props.iter().map(|d| d.bbox).collect();
                    let labeled = label_boxes(models, &stages, &boxes, p.beam)?;
                    let dets = props
                        .iter()
                        .zip(labeled)
                        .map(|(d, (path, logprob))| ClassifiedDetection {
                            image: i,
                            bbox: d.bbox,
                            category: Some(path),
                            score: f64::from(d.score) * logprob.exp(),
                        })
                        .collect();
                    let truths = rec
                        .objects
                        .iter()
                        .map(|o| {
                            Ok(GroundTruthBox {
                                image: i,
                                bbox: o.bbox,
                                category: o.path(&models.tree)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok((dets, truths))
                })
                .collect::<Result<Vec<_>>>()?;
            let (dets, truths): (Vec<_>, Vec<_>) = per_scene.into_iter().unzip();
            let dets: Vec<_> = dets.into_iter().flatten().collect();
            let truths: Vec<_> = truths.into_iter().flatten().collect();
            let m = mean_average_precision(&dets, &truths, p.iou_thresh)?;
            report.map = m.map;
            for (path, ap) in m.per_class {
                report.per_class_ap.insert(class_key(&models.tree, path)?, ap);
            }
        }
    }
    Ok(report)
}

/// Top-1 category path and its log-probability for each box.
fn label_boxes(models: &Models, stages: &[FeatureMap], boxes: &[BBox], beam: usize) -> Result<Vec<([u32; 3], f64)>> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let rois = models.pool(stages, boxes)?;
    let refs: Vec<&RoiFeature> = rois.iter().collect();
    let ctxs = models.semantic.contexts(&models.semantic_store, &refs)?;
    ctxs.iter()
        .map(|ctx| {
            let best = beam_search(&models.scorer(ctx), &models.tree, beam, 1)?.remove(0);
            let logprob = best.logprob;
            Ok((models.tree.decode_tokens(&best.into_seq())?.path, logprob))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodedLabel {
    pub category: [String; 3],
    pub property: String,
    pub value: String,
    pub tokens: Vec<u32>,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionedLabel {
    pub category: [String; 3],
    pub property: String,
    /// `None` when the decoded leaf has no value for the property.
    pub value: Option<String>,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum BoxLabels {
    Sequences(Vec<DecodedLabel>),
    Conditioned(ConditionedLabel),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferredObject {
    pub bbox: [f32; 4],
    pub score: f32,
    pub labels: BoxLabels,
}

/// Detector, NMS, pooling and constrained decoding on one image.
pub fn infer(models: &Models, image: &Path) -> Result<Vec<InferredObject>> {
    let p = &models.config.protocol;
    let Some((det, store)) = &models.detector else {
        bail!("inference needs a checkpoint with a trained detector (run train-detector)");
    };
    let img = Image::read_ppm(image).with_context(|| format!("reading image {}", image.display()))?;
    let property = match &p.property {
        Some(name) => Some(models.tree.property_id(name)?),
        None => None,
    };
    let stages = models.backbone.forward_stages(&img)?;
    let dets = det.detect(store, &stages, p.nms_thresh)?;
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let mut out = Vec::with_capacity(dets.len());
    for (chunk_dets, chunk_boxes) in dets.chunks(INFER_BATCH).zip(boxes.chunks(INFER_BATCH)) {
        let rois = models.pool(&stages, chunk_boxes)?;
        let refs: Vec<&RoiFeature> = rois.iter().collect();
        let ctxs = models.semantic.contexts(&models.semantic_store, &refs)?;
        for (d, ctx) in chunk_dets.iter().zip(&ctxs) {
            let sc = models.scorer(ctx);
            let labels = match property {
                Some(prop) => {
                    let outcome = property_conditioned_decode(&sc, &models.tree, prop, p.beam)?;
                    let (value, logprob) = match outcome {
                        ConditionedOutcome::Value { value, logprob, .. } => {
                            (Some(models.tree.value_names()[value as usize].clone()), logprob)
                        }
                        ConditionedOutcome::NoAttribute { logprob, .. } => (None, logprob),
                    };
                    BoxLabels::Conditioned(ConditionedLabel {
                        category: models.tree.path_names(outcome.path())?,
                        property: models.tree.property_names()[prop as usize].clone(),
                        value,
                        logprob,
                    })
                }
                None => BoxLabels::Sequences(
                    beam_search(&sc, &models.tree, p.beam, p.topm)?
                        .into_iter()
                        .map(|h| {
                            let logprob = h.logprob;
                            let tokens = h.tokens.clone();
                            let named = models.tree.name(&models.tree.decode_tokens(&h.into_seq())?)?;
                            Ok(DecodedLabel {
                                category: named.category,
                                property: named.property,
                                value: named.value,
                                tokens,
                                logprob,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            out.push(InferredObject {
                bbox: d.bbox.into(),
                score: d.score,
                labels,
            });
        }
    }
    Ok(out)
}

/// Axis of a [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RoiSize,
    QueryTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub roi_size: usize,
    pub query_tokens: usize,
    pub cate_acc_full: Option<f64>,
    pub attr_acc: Option<f64>,
}

/// Trains and evaluates (gtbox protocol) once per axis value; every other
/// setting, including the seed, is shared.
pub fn sweep(
    cfg: &RunConfig,
    data: &Dataset,
    axis: SweepAxis,
    values: &[usize],
    mut log: impl FnMut(&str),
) -> Result<Vec<SweepRow>> {
    ensure!(!values.is_empty(), "sweep needs at least one value");
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::RoiSize => c.model.roi_size = v,
            SweepAxis::QueryTokens => c.model.query_tokens = v,
        }
        c.protocol.protocol = Protocol::Gtbox;
        let ckpt = train_semantic(&c, data, None, None, |e, l| {
            log(&format!(
                "roi_size {} query_tokens {} epoch {e} loss {l:.6}",
                c.model.roi_size, c.model.query_tokens
            ))
        })?;
        let report = evaluate(&Models::from_checkpoint(&ckpt)?, data)?;
        rows.push(SweepRow {
            roi_size: c.model.roi_size,
            query_tokens: c.model.query_tokens,
            cate_acc_full: report.cate_acc_full,
            attr_acc: report.attr_acc,
        });
    }
    Ok(rows)
}

/// Markdown table with one row per setting.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut s =
        String::from("| ROI Output Size | Q-Former Output Tokens | Cate Acc. | Attr Acc. |\n|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {0}x{0} | {1} | {2} | {3} |\n",
            r.roi_size,
            r.query_tokens,
            pct(r.cate_acc_full),
            pct(r.attr_acc)
        ));
    }
    s
}
