//! Accuracy under provided boxes, per-level category accuracy, detection
//! mAP and the JSON report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vision::BBox;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {truths} ground-truth objects")]
    CountMismatch { predictions: usize, truths: usize },
    #[error("object {object}: predicted property {predicted} paired with ground-truth property {truth}")]
    PropertyMismatch { object: usize, predicted: u32, truth: u32 },
    #[error("detection {0} carries no category")]
    MissingCategory(usize),
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Depth of category-path agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategoryLevel {
    L1,
    L2,
    L3,
    /// All three tokens; identical to `L3` because matching nests.
    Full,
}

impl CategoryLevel {
    fn depth(self) -> usize {
        match self {
            CategoryLevel::L1 => 1,
            CategoryLevel::L2 => 2,
            CategoryLevel::L3 | CategoryLevel::Full => 3,
        }
    }
}

/// Fraction of objects whose first `level` category tokens all match.
/// `None` for an empty set.
pub fn category_accuracy(preds: &[[u32; 3]], truths: &[[u32; 3]], level: CategoryLevel) -> Result<Option<f64>> {
    if preds.len() != truths.len() {
        return Err(EvalError::CountMismatch {
            predictions: preds.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Ok(None);
    }
    let d = level.depth();
    let hits = preds.iter().zip(truths).filter(|(p, t)| p[..d] == t[..d]).count();
    Ok(Some(hits as f64 / truths.len() as f64))
}

/// Predicted value for one ground-truth (property, value) pair; `None` when
/// the decoder reported that the leaf has no such attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributePrediction {
    pub property: u32,
    pub value: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    /// Correct values over all ground-truth triplets.
    pub per_triplet: f64,
    /// Mean over objects (with at least one triplet) of their correct fraction.
    pub per_object: f64,
}

/// `preds[i][j]` answers `truths[i][j]`, a (property, value) pair.
pub fn attribute_accuracy(
    preds: &[Vec<AttributePrediction>],
    truths: &[Vec<(u32, u32)>],
) -> Result<Option<AttributeAccuracy>> {
    if preds.len() != truths.len() {
        return Err(EvalError::CountMismatch {
            predictions: preds.len(),
            truths: truths.len(),
        });
    }
    let (mut hits, mut total, mut obj_sum, mut objects) = (0usize, 0usize, 0.0f64, 0usize);
    for (object, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.len() != t.len() {
            return Err(EvalError::CountMismatch {
                predictions: p.len(),
                truths: t.len(),
            });
        }
        let mut h = 0;
        for (pp, &(prop, val)) in p.iter().zip(t) {
            if pp.property != prop {
                return Err(EvalError::PropertyMismatch {
                    object,
                    predicted: pp.property,
                    truth: prop,
                });
            }
            if pp.value == Some(val) {
                h += 1;
            }
        }
        if !t.is_empty() {
            hits += h;
            total += t.len();
            obj_sum += h as f64 / t.len() as f64;
            objects += 1;
        }
    }
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(AttributeAccuracy {
        per_triplet: hits as f64 / total as f64,
        per_object: obj_sum / objects as f64,
    }))
}

/// A scored detection with its predicted leaf category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifiedDetection {
    pub image: usize,
    pub bbox: BBox,
    pub category: Option<[u32; 3]>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub image: usize,
    pub bbox: BBox,
    pub category: [u32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    /// Mean AP over categories with at least one ground-truth box.
    pub map: Option<f64>,
    pub per_class: BTreeMap<[u32; 3], f64>,
}

const RECALL_POINTS: usize = 101;

/// Average precision with 101-point interpolation from per-detection
/// true-positive flags (already in descending score order).
fn interpolated_ap(tp: &[bool], positives: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / positives as f64);
    }
    // Precision envelope: best precision at any recall at or beyond.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while j < recall.len() && recall[j] < r {
            j += 1;
        }
        if j < recall.len() {
            sum += precision[j];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Class-aware matching at `iou_threshold`: per category, detections in
/// descending score order (ties by input order) claim the unmatched
/// same-image ground truth of highest IoU, if that IoU reaches the
/// threshold.
pub fn mean_average_precision(
    dets: &[ClassifiedDetection],
    truths: &[GroundTruthBox],
    iou_threshold: f64,
) -> Result<MapResult> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(EvalError::InvalidThreshold(iou_threshold));
    }
    let mut by_class: BTreeMap<[u32; 3], (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        let c = d.category.ok_or(EvalError::MissingCategory(i))?;
        by_class.entry(c).or_default().0.push(i);
    }
    for (i, t) in truths.iter().enumerate() {
        by_class.entry(t.category).or_default().1.push(i);
    }
    let mut per_class = BTreeMap::new();
    for (class, (mut ds, gs)) in by_class {
        if gs.is_empty() {
            continue;
        }
        ds.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        let mut matched = vec![false; gs.len()];
        let tp: Vec<bool> = ds
            .iter()
            .map(|&di| {
                let d = &dets[di];
                let mut best: Option<(usize, f64)> = None;
                for (k, &gi) in gs.iter().enumerate() {
                    let g = &truths[gi];
                    if matched[k] || g.image != d.image {
                        continue;
                    }
                    let o = f64::from(d.bbox.iou(&g.bbox));
                    if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                        best = Some((k, o));
                    }
                }
                match best {
                    Some((k, _)) => {
                        matched[k] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.insert(class, interpolated_ap(&tp, gs.len()));
    }
    let map = if per_class.is_empty() {
        None
    } else {
        Some(per_class.values().sum::<f64>() / per_class.len() as f64)
    };
    Ok(MapResult { map, per_class })
}

/// Evaluation summary. Absent rates serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cate_acc_l1: Option<f64>,
    pub cate_acc_l2: Option<f64>,
    pub cate_acc_l3: Option<f64>,
    pub cate_acc_full: Option<f64>,
    /// Per ground-truth triplet.
    pub attr_acc: Option<f64>,
    /// Mean of per-object attribute accuracies.
    pub attr_acc_object: Option<f64>,
    pub map: Option<f64>,
    /// Keyed by the leaf's category names joined with `" > "`.
    pub per_class_ap: BTreeMap<String, f64>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn empty(config: serde_json::Value) -> Self {
        Self {
            cate_acc_l1: None,
            cate_acc_l2: None,
            cate_acc_l3: None,
            cate_acc_full: None,
            attr_acc: None,
            attr_acc_object: None,
            map: None,
            per_class_ap: BTreeMap::new(),
            config,
        }
    }

    /// Fills the category fields from top-1 paths.
    pub fn set_category(&mut self, preds: &[[u32; 3]], truths: &[[u32; 3]]) -> Result<()> {
        self.cate_acc_l1 = category_accuracy(preds, truths, CategoryLevel::L1)?;
        self.cate_acc_l2 = category_accuracy(preds, truths, CategoryLevel::L2)?;
        self.cate_acc_l3 = category_accuracy(preds, truths, CategoryLevel::L3)?;
        self.cate_acc_full = category_accuracy(preds, truths, CategoryLevel::Full)?;
        Ok(())
    }

    pub fn set_attributes(&mut self, acc: Option<AttributeAccuracy>) {
        self.attr_acc = acc.map(|a| a.per_triplet);
        self.attr_acc_object = acc.map(|a| a.per_object);
    }
}

pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| EvalError::Parse {
        path: path.display().to_string(),
        source,
    })
}
