//! Run configuration: a JSON document mirroring [`RunConfig`], with command
//! line flags applied on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use detgen::detect::DetectorConfig;
use detgen::generator::{Architecture, GeneratorConfig};
use detgen::hiercodec::HierarchySpec;
use detgen::scenegen::DatasetConfig;
use detgen::tensor::AdamConfig;
use detgen::vision::{BackboneConfig, QFormerConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory written by `gen-data` and read by the other commands.
    pub data: PathBuf,
    /// Hierarchy document; `<data>/hierarchy.json` when absent.
    pub hierarchy: Option<PathBuf>,
    /// Scene generation settings used by `gen-data`.
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub detector: DetectorTrainConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: PathBuf::from("data"),
            hierarchy: None,
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            detector: DetectorTrainConfig::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Backbone stage the regions are pooled from.
    pub roi_stage: usize,
    pub roi_size: usize,
    pub sampling: usize,
    pub query_tokens: usize,
    pub qformer_dim: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    pub qformer_ff: usize,
    pub gen_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub gen_heads: usize,
    pub gen_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::EncoderDecoder,
            roi_stage: 0,
            roi_size: 7,
            sampling: 2,
            query_tokens: 128,
            qformer_dim: 64,
            qformer_layers: 1,
            qformer_heads: 4,
            qformer_ff: 128,
            gen_dim: 64,
            enc_layers: 1,
            dec_layers: 1,
            gen_heads: 4,
            gen_ff: 128,
        }
    }
}

impl ModelConfig {
    pub fn qformer(&self, feat_dim: usize) -> QFormerConfig {
        QFormerConfig {
            queries: self.query_tokens,
            dim: self.qformer_dim,
            layers: self.qformer_layers,
            heads: self.qformer_heads,
            ff: self.qformer_ff,
            roi_size: self.roi_size,
            sampling: self.sampling,
            feat_dim,
        }
    }

    pub fn generator(&self, vocab_size: usize) -> GeneratorConfig {
        let mut g = GeneratorConfig::new(self.architecture, vocab_size, self.query_tokens, self.qformer_dim);
        g.dim = self.gen_dim;
        g.enc_layers = self.enc_layers;
        g.dec_layers = self.dec_layers;
        g.heads = self.gen_heads;
        g.ff = self.gen_ff;
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Per-epoch cosine decay from `lr` to `lr * lr_floor`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    /// Objects per step.
    pub batch: usize,
    pub schedule: Schedule,
    pub lr_floor: f32,
    /// Use only the first this many training scenes.
    pub train_scenes: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 50,
            batch: 32,
            schedule: Schedule::Constant,
            lr_floor: 0.05,
            train_scenes: None,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Learning rate at fractional progress `t` in `[0, 1)`.
    pub fn lr_at(&self, t: f32) -> f32 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let f = 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
                self.lr * (self.lr_floor + (1.0 - self.lr_floor) * f)
            }
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "{what}: lr must be positive");
        ensure!(self.weight_decay >= 0.0, "{what}: weight decay must be non-negative");
        ensure!(self.batch > 0, "{what}: batch must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.lr_floor),
            "{what}: lr_floor must lie in [0, 1]"
        );
        ensure!(self.train_scenes != Some(0), "{what}: train_scenes must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub model: DetectorConfig,
    pub optim: OptimConfig,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            model: DetectorConfig::default(),
            optim: OptimConfig {
                lr: 1e-3,
                epochs: 8,
                batch: 8,
                schedule: Schedule::Cosine,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Ground-truth boxes are given; category and attribute accuracy.
    Gtbox,
    /// Detector, NMS and generation; mAP.
    E2e,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Proposals {
    Detector,
    /// Ground-truth boxes stand in for the detector in the e2e protocol.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    pub split: Split,
    pub proposals: Proposals,
    /// Evaluate only the first this many scenes of the split.
    pub eval_scenes: Option<usize>,
    pub beam: usize,
    pub topm: usize,
    /// Property decoded by `infer` (all sequences when absent).
    pub property: Option<String>,
    pub iou_thresh: f64,
    pub nms_thresh: f32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Gtbox,
            split: Split::Test,
            proposals: Proposals::Detector,
            eval_scenes: None,
            beam: 5,
            topm: 1,
            property: None,
            iou_thresh: 0.85,
            nms_thresh: 0.5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hierarchy_path(&self) -> PathBuf {
        self.hierarchy
            .clone()
            .unwrap_or_else(|| self.data.join("hierarchy.json"))
    }

    pub fn load_hierarchy(&self) -> Result<HierarchySpec> {
        let path = self.hierarchy_path();
        ensure!(path.exists(), "hierarchy {} does not exist", path.display());
        Ok(HierarchySpec::load(&path)?)
    }

    /// Range checks; file existence is checked by the commands that read them.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let m = &self.model;
        ensure!(
            m.roi_stage < self.backbone.channels.len(),
            "roi_stage {} out of range",
            m.roi_stage
        );
        ensure!(
            m.roi_size > 0 && m.sampling > 0,
            "roi_size and sampling must be positive"
        );
        ensure!(m.query_tokens > 0, "query_tokens must be positive");
        self.optim.validate("optim")?;
        self.detector.optim.validate("detector.optim")?;
        self.detector.model.validate()?;
        let p = &self.protocol;
        ensure!(p.beam > 0, "beam must be positive");
        ensure!(p.topm > 0 && p.topm <= p.beam, "topm must lie in 1..=beam");
        ensure!(
            p.iou_thresh > 0.0 && p.iou_thresh <= 1.0,
            "iou_thresh must lie in (0, 1]"
        );
        ensure!(
            p.nms_thresh > 0.0 && p.nms_thresh <= 1.0,
            "nms_thresh must lie in (0, 1]"
        );
        ensure!(p.eval_scenes != Some(0), "eval_scenes must be positive");
        Ok(())
    }
}

/// Parses `--arch` values.
pub fn parse_arch(s: &str) -> Result<Architecture> {
    match s {
        "encdec" => Ok(Architecture::EncoderDecoder),
        "declonly" => Ok(Architecture::DecoderOnly),
        _ => bail!("unknown architecture {s:?} (expected encdec or declonly)"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.optim.lr, 1e-4);
        assert_eq!(c.optim.weight_decay, 0.01);
        assert_eq!(c.optim.epochs, 50);
        assert_eq!(c.protocol.iou_thresh, 0.85);
        assert_eq!(c.protocol.nms_thresh, 0.5);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "optim": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.optim.epochs, 2);
        assert_eq!(c.optim.lr, 1e-4);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 3}"#).is_err());
    }

    #[test]
    fn range_checks() {
        let mut c = RunConfig::default();
        c.protocol.topm = 6;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.roi_stage = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.optim.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let o = OptimConfig {
            lr: 1.0,
            schedule: Schedule::Cosine,
            lr_floor: 0.1,
            ..OptimConfig::default()
        };
        assert_eq!(o.lr_at(0.0), 1.0);
        assert!((o.lr_at(0.5) - 0.55).abs() < 1e-6);
        assert!((o.lr_at(1.0) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn arch_names() {
        assert_eq!(parse_arch("encdec").unwrap(), Architecture::EncoderDecoder);
        assert_eq!(parse_arch("declonly").unwrap(), Architecture::DecoderOnly);
        assert!(parse_arch("gpt").is_err());
    }
}
