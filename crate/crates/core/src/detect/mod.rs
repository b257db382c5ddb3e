//! Box overlap, non-maximum suppression, a grid detector head over the
//! frozen backbone and the proposal sources used by the two evaluation
//! protocols.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Linear;
use crate::tensor::{Adam, Graph, ParamStore, Tensor, TensorError, Var};
use crate::vision::{roi_align, BBox, FeatureMap, VisionError};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("box {0:?} has a nonpositive or non-finite extent")]
    InvalidBox([f32; 4]),
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f32),
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("feature map shape {got:?} does not match the detector ({expected:?})")]
    FeatureShape { got: [usize; 2], expected: [usize; 2] },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vision(#[from] VisionError),
}

pub type Result<T> = std::result::Result<T, DetectError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Objectness in [0, 1].
    pub score: f32,
}

fn check_box(b: &BBox) -> Result<()> {
    if b.is_valid() {
        Ok(())
    } else {
        Err(DetectError::InvalidBox((*b).into()))
    }
}

/// Intersection over union of two boxes with positive extents.
pub fn iou(a: &BBox, b: &BBox) -> Result<f32> {
    check_box(a)?;
    check_box(b)?;
    Ok(a.iou(b))
}

/// Greedy class-agnostic suppression. Returns kept indices in descending
/// score order; equal scores keep the lower index first.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Result<Vec<usize>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(DetectError::InvalidThreshold(iou_threshold));
    }
    for d in dets {
        check_box(&d.bbox)?;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| dets[k].bbox.iou(&dets[i].bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Maps boxes to and from per-cell regression targets: center offset from
/// the cell center in cell units and log-scale size relative to a prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCoder {
    pub stride: f32,
    pub prior: f32,
}

impl GridCoder {
    /// Cell containing the box center, clamped to the grid.
    pub fn cell_of(&self, b: &BBox, grid_w: usize, grid_h: usize) -> (usize, usize) {
        let (cx, cy) = b.center();
        let clamp = |v: f32, n: usize| ((v / self.stride).floor().max(0.0) as usize).min(n - 1);
        (clamp(cx, grid_w), clamp(cy, grid_h))
    }

    pub fn encode(&self, b: &BBox, (x, y): (usize, usize)) -> [f32; 4] {
        let (s, p) = (f64::from(self.stride), f64::from(self.prior));
        let cx = f64::from(b.x) + 0.5 * f64::from(b.w);
        let cy = f64::from(b.y) + 0.5 * f64::from(b.h);
        [
            (cx / s - (x as f64 + 0.5)) as f32,
            (cy / s - (y as f64 + 0.5)) as f32,
            (f64::from(b.w) / p).ln() as f32,
            (f64::from(b.h) / p).ln() as f32,
        ]
    }

    pub fn decode(&self, t: [f32; 4], (x, y): (usize, usize)) -> BBox {
        let (s, p) = (f64::from(self.stride), f64::from(self.prior));
        let cx = (x as f64 + 0.5 + f64::from(t[0])) * s;
        let cy = (y as f64 + 0.5 + f64::from(t[1])) * s;
        let (w, h) = (p * f64::from(t[2]).exp(), p * f64::from(t[3]).exp());
        BBox::new((cx - 0.5 * w) as f32, (cy - 0.5 * h) as f32, w as f32, h as f32)
    }
}

/// Refinement targets of `gt` relative to a proposal `p`.
pub fn refine_encode(p: &BBox, gt: &BBox) -> [f32; 4] {
    let ((pcx, pcy), (gcx, gcy)) = (p.center(), gt.center());
    [
        (gcx - pcx) / p.w,
        (gcy - pcy) / p.h,
        (gt.w / p.w).ln(),
        (gt.h / p.h).ln(),
    ]
}

pub fn refine_decode(p: &BBox, t: [f32; 4]) -> BBox {
    let (pcx, pcy) = p.center();
    let (cx, cy) = (pcx + t[0] * p.w, pcy + t[1] * p.h);
    let (w, h) = (p.w * t[2].exp(), p.h * t[3].exp());
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

/// Scales a box about its center.
pub fn expand(b: &BBox, factor: f32) -> BBox {
    let (cx, cy) = b.center();
    let (w, h) = (b.w * factor, b.h * factor);
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Backbone stage feeding the grid head.
    pub grid_stage: usize,
    /// Backbone stage sampled by the refinement head.
    pub refine_stage: usize,
    /// Neighborhood radius in cells around each grid cell.
    pub radius: usize,
    pub hidden: usize,
    /// Box size (pixels) decoded from zero log-scale offsets.
    pub prior: f32,
    pub refine_size: usize,
    pub refine_hidden: usize,
    /// Proposal enlargement before sampling refinement features.
    pub refine_context: f32,
    pub refine_iters: usize,
    /// Largest relative scale of the ground-truth perturbations the
    /// refinement head learns to undo; each box draws its own scale
    /// uniformly from `[refine_jitter / 8, refine_jitter]`.
    pub refine_jitter: f32,
    /// Perturbed copies of each ground-truth box per training step.
    pub refine_samples: usize,
    /// Cells below this objectness are not emitted.
    pub objectness_floor: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid_stage: 2,
            refine_stage: 0,
            radius: 2,
            hidden: 128,
            prior: 28.0,
            refine_size: 7,
            refine_hidden: 256,
            refine_context: 1.3,
            refine_iters: 3,
            refine_jitter: 0.2,
            refine_samples: 4,
            objectness_floor: 0.3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectError::Config(m.to_string()));
        if self.hidden == 0 || self.refine_hidden == 0 || self.refine_size == 0 {
            return bad("layer widths and refine size must be positive");
        }
        if !(self.prior > 0.0 && self.prior.is_finite()) {
            return bad("prior must be positive");
        }
        if !(self.refine_context >= 1.0 && self.refine_context.is_finite()) {
            return bad("refine context must be at least 1");
        }
        if !(self.refine_jitter >= 0.0 && self.refine_jitter.is_finite()) {
            return bad("refine jitter must be nonnegative");
        }
        if self.refine_samples == 0 {
            return bad("refine samples must be positive");
        }
        if !(0.0..=1.0).contains(&self.objectness_floor) {
            return bad("objectness floor must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

impl Mlp {
    /// The output layer starts at zero.
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        let std = (2.0 / dims[0] as f32).sqrt();
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dims[0], dims[1], std, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dims[1], dims[2], 0.0, rng)?,
        })
    }

    fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h)?;
        Ok(self.out.forward(g, store, h)?)
    }
}

/// One training scene: backbone stages and ground-truth boxes.
#[derive(Debug, Clone, Copy)]
pub struct DetectorSample<'a> {
    pub stages: &'a [FeatureMap],
    pub boxes: &'a [BBox],
}

/// Loss components of one detector step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorLoss {
    pub objectness: f32,
    pub offsets: f32,
    pub refine: f32,
}

impl DetectorLoss {
    pub fn total(&self) -> f32 {
        self.objectness + self.offsets + self.refine
    }
}

/// Grid head (objectness and box per cell of a coarse stage) followed by a
/// refinement head that regresses box corrections from ROI features of a
/// fine stage.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    grid_dim: usize,
    refine_dim: usize,
    grid_stride: usize,
    grid: Mlp,
    refine: Mlp,
}

impl Detector {
    /// `stage_dims` and `stage_strides` describe the backbone stages.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: DetectorConfig,
        stage_dims: &[usize],
        stage_strides: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let stage = |s: usize| {
            stage_dims
                .get(s)
                .copied()
                .zip(stage_strides.get(s).copied())
                .ok_or_else(|| DetectError::Config(format!("backbone has no stage {s}")))
        };
        let (gd, stride) = stage(config.grid_stage)?;
        let (rd, _) = stage(config.refine_stage)?;
        let side = 2 * config.radius + 1;
        let grid_dim = side * side * gd;
        let refine_dim = config.refine_size * config.refine_size * rd;
        let grid = Mlp::new(store, "detector.grid", [grid_dim, config.hidden, 5], rng)?;
        let refine = Mlp::new(store, "detector.refine", [refine_dim, config.refine_hidden, 4], rng)?;
        Ok(Self {
            config,
            grid_dim,
            refine_dim,
            grid_stride: stride,
            grid,
            refine,
        })
    }

    pub fn config(&self) -> DetectorConfig {
        self.config
    }

    pub fn coder(&self) -> GridCoder {
        GridCoder {
            stride: self.grid_stride as f32,
            prior: self.config.prior,
        }
    }

    fn grid_map<'a>(&self, stages: &'a [FeatureMap]) -> Result<&'a FeatureMap> {
        let f = stages
            .get(self.config.grid_stage)
            .ok_or_else(|| DetectError::Config("missing grid stage".into()))?;
        let side = 2 * self.config.radius + 1;
        if f.dim * side * side != self.grid_dim || f.stride != self.grid_stride {
            return Err(DetectError::FeatureShape {
                got: [f.dim, f.stride],
                expected: [self.grid_dim / (side * side), self.grid_stride],
            });
        }
        Ok(f)
    }

    fn refine_map<'a>(&self, stages: &'a [FeatureMap]) -> Result<&'a FeatureMap> {
        let f = stages
            .get(self.config.refine_stage)
            .ok_or_else(|| DetectError::Config("missing refine stage".into()))?;
        let r2 = self.config.refine_size * self.config.refine_size;
        if f.dim * r2 != self.refine_dim {
            return Err(DetectError::FeatureShape {
                got: [f.dim, f.stride],
                expected: [self.refine_dim / r2, f.stride],
            });
        }
        Ok(f)
    }

    /// Zero-padded neighborhoods of every cell, row-major over the grid.
    fn grid_inputs(&self, f: &FeatureMap) -> Tensor {
        let r = self.config.radius as isize;
        let mut data = Vec::with_capacity(f.height * f.width * self.grid_dim);
        for y in 0..f.height as isize {
            for x in 0..f.width as isize {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= f.height as isize || xx >= f.width as isize {
                            data.extend(std::iter::repeat_n(0.0, f.dim));
                        } else {
                            data.extend_from_slice(f.cell(yy as usize, xx as usize));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![f.height * f.width, self.grid_dim], data).expect("sized above")
    }

    fn refine_inputs(&self, f: &FeatureMap, boxes: &[BBox]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(boxes.len() * self.refine_dim);
        for b in boxes {
            let roi = roi_align(f, &expand(b, self.config.refine_context), self.config.refine_size, 2)?;
            data.extend(roi.data);
        }
        Ok(Tensor::new(vec![boxes.len(), self.refine_dim], data)?)
    }

    /// Raw grid outputs `[cells, 5]`: objectness logit and box offsets.
    fn grid_raw(&self, store: &ParamStore, f: &FeatureMap) -> Result<Vec<f32>> {
        let mut g = Graph::no_grad();
        let x = g.constant(&self.grid_inputs(f));
        let y = self.grid.forward(&mut g, store, x)?;
        Ok(g.value(y).to_vec())
    }

    /// Every cell of the grid stage whose objectness reaches the floor,
    /// decoded to image coordinates, before refinement and suppression.
    pub fn grid_detections(&self, store: &ParamStore, stages: &[FeatureMap]) -> Result<Vec<Detection>> {
        let f = self.grid_map(stages)?;
        let raw = self.grid_raw(store, f)?;
        let coder = self.coder();
        let mut out = Vec::new();
        for (i, row) in raw.chunks_exact(5).enumerate() {
            let score = 1.0 / (1.0 + (-row[0]).exp());
            if score >= self.config.objectness_floor {
                let bbox = coder.decode([row[1], row[2], row[3], row[4]], (i % f.width, i / f.width));
                if bbox.is_valid() {
                    out.push(Detection { bbox, score });
                }
            }
        }
        Ok(out)
    }

    /// Applies the refinement head `refine_iters` times.
    pub fn refine(&self, store: &ParamStore, stages: &[FeatureMap], boxes: &[BBox]) -> Result<Vec<BBox>> {
        let f = self.refine_map(stages)?;
        let mut boxes = boxes.to_vec();
        if boxes.is_empty() {
            return Ok(boxes);
        }
        for _ in 0..self.config.refine_iters {
            let mut g = Graph::no_grad();
            let x = g.constant(&self.refine_inputs(f, &boxes)?);
            let y = self.refine.forward(&mut g, store, x)?;
            let t = g.value(y);
            for (b, t) in boxes.iter_mut().zip(t.chunks_exact(4)) {
                let nb = refine_decode(b, [t[0], t[1], t[2], t[3]]);
                if nb.is_valid() {
                    *b = nb;
                }
            }
        }
        Ok(boxes)
    }

    /// Grid detections, refinement, then suppression.
    pub fn detect(&self, store: &ParamStore, stages: &[FeatureMap], nms_threshold: f32) -> Result<Vec<Detection>> {
        let mut dets = self.grid_detections(store, stages)?;
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        for (d, b) in dets.iter_mut().zip(self.refine(store, stages, &boxes)?) {
            d.bbox = b;
        }
        let kept = nms(&dets, nms_threshold)?;
        Ok(kept.into_iter().map(|i| dets[i]).collect())
    }

    /// Objectness is binary cross-entropy averaged separately over positive
    /// and negative cells; offsets are L1 at positive cells; refinement is L1
    /// on corrections from jittered ground truth.
    pub fn loss<'p, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        samples: &[DetectorSample<'_>],
        rng: &mut R,
    ) -> Result<[Var; 3]> {
        let coder = self.coder();
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut pos = Vec::new();
        let mut offsets = Vec::new();
        let mut cells = 0;
        let mut refine_in = Vec::new();
        let mut refine_t = Vec::new();
        let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
        let top = self.config.refine_jitter;
        for s in samples {
            let f = self.grid_map(s.stages)?;
            let n = f.width * f.height;
            let mut lab = vec![0.0f32; n];
            for b in s.boxes {
                check_box(b)?;
                let (x, y) = coder.cell_of(b, f.width, f.height);
                let idx = y * f.width + x;
                if lab[idx] == 0.0 {
                    lab[idx] = 1.0;
                    pos.push(cells + idx);
                    offsets.extend(coder.encode(b, (x, y)));
                }
            }
            inputs.extend(self.grid_inputs(f).into_data());
            labels.extend(lab);
            cells += n;
            let rf = self.refine_map(s.stages)?;
            let props: Vec<BBox> = s
                .boxes
                .iter()
                .flat_map(|b| std::iter::repeat_n(b, self.config.refine_samples))
                .map(|b| {
                    let (cx, cy) = b.center();
                    let sigma = if top > 0.0 {
                        rng.random_range(top / 8.0..=top)
                    } else {
                        0.0
                    };
                    let mut n = || sigma * unit.sample(rng);
                    let (w, h) = (b.w * n().exp(), b.h * n().exp());
                    let (cx, cy) = (cx + b.w * n(), cy + b.h * n());
                    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
                })
                .collect();
            let targets = s
                .boxes
                .iter()
                .flat_map(|b| std::iter::repeat_n(b, self.config.refine_samples));
            for (p, b) in props.iter().zip(targets) {
                refine_t.extend(refine_encode(p, b));
            }
            refine_in.extend(self.refine_inputs(rf, &props)?.into_data());
        }
        let x = g.constant_from(vec![cells, self.grid_dim], inputs)?;
        let out = self.grid.forward(g, store, x)?;
        let neg: Vec<usize> = (0..cells).filter(|i| labels[*i] == 0.0).collect();
        let logits = g.narrow(out, 1, 0, 1)?;
        let mut obj = None;
        for (ids, target) in [(&pos, 1.0f32), (&neg, 0.0)] {
            if ids.is_empty() {
                continue;
            }
            let sel = g.index_select(logits, ids)?;
            let l = g.bce_with_logits(sel, &vec![target; ids.len()])?;
            obj = Some(match obj {
                None => l,
                Some(o) => g.add(o, l)?,
            });
        }
        let obj = obj.expect("at least one cell");
        let offset_loss = if pos.is_empty() {
            g.constant(&Tensor::scalar(0.0))
        } else {
            let sel = g.index_select(out, &pos)?;
            let pred = g.narrow(sel, 1, 1, 4)?;
            let t = g.constant_from(vec![pos.len(), 4], offsets)?;
            let d = g.sub(pred, t)?;
            let d = g.abs(d)?;
            g.mean(d)?
        };
        let refine_loss = if refine_t.is_empty() {
            g.constant(&Tensor::scalar(0.0))
        } else {
            let n = refine_t.len() / 4;
            let x = g.constant_from(vec![n, self.refine_dim], refine_in)?;
            let pred = self.refine.forward(g, store, x)?;
            let t = g.constant_from(vec![n, 4], refine_t)?;
            let d = g.sub(pred, t)?;
            let d = g.abs(d)?;
            g.mean(d)?
        };
        Ok([obj, offset_loss, refine_loss])
    }

    /// One optimizer step on the summed loss. Returns the pre-step
    /// components.
    pub fn train_step<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        adam: &mut Adam,
        samples: &[DetectorSample<'_>],
        rng: &mut R,
    ) -> Result<DetectorLoss> {
        let (parts, grads) = {
            let mut g = Graph::new();
            let [a, b, c] = self.loss(&mut g, store, samples, rng)?;
            let parts = DetectorLoss {
                objectness: g.value(a)[0],
                offsets: g.value(b)[0],
                refine: g.value(c)[0],
            };
            let ab = g.add(a, b)?;
            let total = g.add(ab, c)?;
            (parts, g.backward(total)?)
        };
        store.zero_grads();
        grads.accumulate_into(store);
        adam.step(store)?;
        Ok(parts)
    }
}

/// Deterministic perturbation of ground-truth boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    /// Standard deviation of center and log-size noise relative to box size.
    pub sigma: f32,
    pub drop_rate: f32,
    pub duplicate_rate: f32,
    pub seed: u64,
}

/// Where evaluation boxes come from.
#[derive(Debug, Clone, Copy)]
pub enum ProposalSource<'a> {
    GroundTruth,
    Jittered(JitterParams),
    Model {
        detector: &'a Detector,
        store: &'a ParamStore,
        nms_threshold: f32,
    },
}

impl ProposalSource<'_> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ProposalSource::GroundTruth => Ok(()),
            ProposalSource::Jittered(j) => {
                let rate = |r: f32| (0.0..=1.0).contains(&r);
                if !(j.sigma >= 0.0 && j.sigma.is_finite()) || !rate(j.drop_rate) || !rate(j.duplicate_rate) {
                    return Err(DetectError::Config(format!("invalid jitter parameters {j:?}")));
                }
                Ok(())
            }
            ProposalSource::Model { nms_threshold, .. } => {
                if nms_threshold > 0.0 && nms_threshold <= 1.0 {
                    Ok(())
                } else {
                    Err(DetectError::InvalidThreshold(nms_threshold))
                }
            }
        }
    }

    /// Proposals for one scene. `scene` seeds the jitter stream; `stages`
    /// are only read in model mode.
    pub fn propose(&self, boxes: &[BBox], scene: u64, stages: &[FeatureMap]) -> Result<Vec<Detection>> {
        self.validate()?;
        match *self {
            ProposalSource::GroundTruth => Ok(boxes.iter().map(|&bbox| Detection { bbox, score: 1.0 }).collect()),
            ProposalSource::Jittered(j) => {
                let mut rng = ChaCha8Rng::seed_from_u64(j.seed);
                rng.set_stream(scene);
                let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
                let perturb = |b: &BBox, rng: &mut ChaCha8Rng| {
                    if j.sigma == 0.0 {
                        return *b;
                    }
                    let (cx, cy) = b.center();
                    let cx = cx + j.sigma * b.w * noise.sample(rng);
                    let cy = cy + j.sigma * b.h * noise.sample(rng);
                    let w = b.w * (j.sigma * noise.sample(rng)).exp();
                    let h = b.h * (j.sigma * noise.sample(rng)).exp();
                    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
                };
                let mut out = Vec::new();
                for b in boxes {
                    if j.drop_rate > 0.0 && rng.random::<f32>() < j.drop_rate {
                        continue;
                    }
                    out.push(Detection {
                        bbox: perturb(b, &mut rng),
                        score: 1.0,
                    });
                    if j.duplicate_rate > 0.0 && rng.random::<f32>() < j.duplicate_rate {
                        out.push(Detection {
                            bbox: perturb(b, &mut rng),
                            score: 1.0,
                        });
                    }
                }
                Ok(out)
            }
            ProposalSource::Model {
                detector,
                store,
                nms_threshold,
            } => detector.detect(store, stages, nms_threshold),
        }
    }
}
