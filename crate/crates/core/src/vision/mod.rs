//! Frozen convolutional backbone, ROI Align and the learnable-query
//! cross-attention pooler that turns a region into a fixed-length embedding.

mod bbox;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::scenegen::Image;
use crate::tensor::{gemm, normal_init, AttnMask, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

pub use bbox::BBox;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("image {width}x{height} is smaller than the backbone stride {stride}")]
    UndersizedImage { width: u32, height: u32, stride: usize },
    #[error("box {0:?} has non-positive or non-finite extent")]
    InvalidBox([f32; 4]),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, VisionError>;

/// Dense `H×W×D` feature grid in row-major, channel-last order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Image pixels per cell.
    pub stride: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, stride: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * dim, "feature map size");
        Self {
            height,
            width,
            dim,
            stride,
            data,
        }
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub seed: u64,
    pub channels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            channels: [32, 64, 64],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    cin: usize,
    cout: usize,
    relu: bool,
}

/// Three seeded 3×3 stride-2 convolutions (total stride 8), frozen at
/// construction: parameters are stored without gradient tracking and are
/// never handed to a graph or optimizer.
#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    store: ParamStore,
    convs: Vec<Conv>,
}

/// `ceil(n / 2)`: output extent of a 3×3, stride-2, pad-1 convolution.
fn half(n: usize) -> usize {
    n.div_ceil(2)
}

impl Backbone {
    pub const STRIDE: usize = 8;

    pub fn new(config: BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let last = i + 1 == config.channels.len();
            let fan_in = (9 * cin) as f32;
            let std = if last {
                (1.0 / fan_in).sqrt()
            } else {
                (2.0 / fan_in).sqrt()
            };
            let w = store
                .add(
                    format!("backbone.conv{i}.w"),
                    normal_init(&[9 * cin, cout], std, &mut rng),
                )
                .expect("unique backbone names");
            let b = store
                .add(format!("backbone.conv{i}.b"), Tensor::zeros([cout]))
                .expect("unique backbone names");
            convs.push(Conv {
                w,
                b,
                cin,
                cout,
                relu: !last,
            });
            cin = cout;
        }
        Self { config, store, convs }
    }

    pub fn config(&self) -> BackboneConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.channels[2]
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    fn conv(&self, c: &Conv, input: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = (half(h), half(w));
        let k = 9 * c.cin;
        let mut cols = vec![0.0f32; oh * ow * k];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * k..][..k];
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c.cin;
                        let dst = (ky * 3 + kx) * c.cin;
                        row[dst..dst + c.cin].copy_from_slice(&input[src..src + c.cin]);
                    }
                }
            }
        }
        let bias = self.store.get(c.b).data();
        let mut out: Vec<f32> = bias.iter().copied().cycle().take(oh * ow * c.cout).collect();
        gemm(
            oh * ow,
            k,
            c.cout,
            1.0,
            &cols,
            (k, 1),
            self.store.get(c.w).data(),
            (c.cout, 1),
            1.0,
            &mut out,
            (c.cout, 1),
        );
        if c.relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        (out, oh, ow)
    }

    /// Feature maps after each stage (strides 2, 4 and 8).
    pub fn forward_stages(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        let (w, h) = (image.width as usize, image.height as usize);
        if w < Self::STRIDE || h < Self::STRIDE {
            return Err(VisionError::UndersizedImage {
                width: image.width,
                height: image.height,
                stride: Self::STRIDE,
            });
        }
        let mut x: Vec<f32> = image.data.iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
        let (mut ch, mut cw) = (h, w);
        let mut stages = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            let (y, oh, ow) = self.conv(c, &x, ch, cw);
            stages.push(FeatureMap::new(oh, ow, c.cout, 2 << i, y.clone()));
            (x, ch, cw) = (y, oh, ow);
        }
        Ok(stages)
    }

    pub fn forward(&self, image: &Image) -> Result<FeatureMap> {
        Ok(self.forward_stages(image)?.pop().expect("three stages"))
    }
}

/// An `R×R×D` pooled region.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub size: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

fn bilinear(fmap: &FeatureMap, y: f32, x: f32, out: &mut [f32]) {
    let y = y.clamp(0.0, (fmap.height - 1) as f32);
    let x = x.clamp(0.0, (fmap.width - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(fmap.height - 1), (x0 + 1).min(fmap.width - 1));
    let (ly, lx) = (y - y0 as f32, x - x0 as f32);
    let corners = [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x1, (1.0 - ly) * lx),
        (y1, x0, ly * (1.0 - lx)),
        (y1, x1, ly * lx),
    ];
    for (cy, cx, wgt) in corners {
        if wgt != 0.0 {
            for (o, v) in out.iter_mut().zip(fmap.cell(cy, cx)) {
                *o += wgt * v;
            }
        }
    }
}

/// ROI Align: maps `b` to feature coordinates by dividing by the stride
/// (cell centers at half-integers, no rounding), splits it into `r×r`
/// bins and averages `n×n` regularly spaced bilinear samples per bin.
/// Samples outside the map clamp to the border.
pub fn roi_align(fmap: &FeatureMap, b: &BBox, r: usize, n: usize) -> Result<RoiFeature> {
    if !b.is_valid() {
        return Err(VisionError::InvalidBox((*b).into()));
    }
    if r == 0 || n == 0 {
        return Err(VisionError::Config("ROI size and sampling must be positive".into()));
    }
    let s = fmap.stride as f32;
    let (x0, y0) = (b.x / s - 0.5, b.y / s - 0.5);
    let (bw, bh) = (b.w / s / r as f32, b.h / s / r as f32);
    let d = fmap.dim;
    let mut data = vec![0.0f32; r * r * d];
    let norm = 1.0 / (n * n) as f32;
    let mut acc = vec![0.0f32; d];
    for by in 0..r {
        for bx in 0..r {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for iy in 0..n {
                let sy = y0 + (by as f32 + (iy as f32 + 0.5) / n as f32) * bh;
                for ix in 0..n {
                    let sx = x0 + (bx as f32 + (ix as f32 + 0.5) / n as f32) * bw;
                    bilinear(fmap, sy, sx, &mut acc);
                }
            }
            let out = &mut data[(by * r + bx) * d..][..d];
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = a * norm;
            }
        }
    }
    Ok(RoiFeature { size: r, dim: d, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormerConfig {
    /// Number of learnable queries (output length).
    pub queries: usize,
    /// Query and output width.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// ROI output size R.
    pub roi_size: usize,
    /// Bilinear samples per bin axis.
    pub sampling: usize,
    /// Width of the incoming region features.
    pub feat_dim: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            queries: 128,
            dim: 128,
            layers: 2,
            heads: 4,
            ff: 256,
            roi_size: 7,
            sampling: 2,
            feat_dim: 64,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.queries > 0
            && self.dim > 0
            && self.heads > 0
            && self.dim.is_multiple_of(self.heads)
            && self.ff > 0
            && self.roi_size > 0
            && self.sampling > 0
            && self.feat_dim > 0;
        if ok {
            Ok(())
        } else {
            Err(VisionError::Config(format!("invalid Q-Former config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct QBlock {
    cross: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

/// Learnable queries cross-attending to the flattened ROI tokens through
/// post-norm blocks of (cross-attention, norm, feed-forward, norm).
#[derive(Debug, Clone)]
pub struct QFormer {
    config: QFormerConfig,
    queries: ParamId,
    in_proj: Linear,
    in_ln: LayerNorm,
    pos: ParamId,
    blocks: Vec<QBlock>,
}

/// Scale of the initial query vectors; large enough that the queries start
/// out distinguishable after normalization.
const QUERY_INIT_STD: f32 = 0.5;

impl QFormer {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: QFormerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let queries = store.add(
            format!("{prefix}.queries"),
            normal_init(&[c.queries, c.dim], QUERY_INIT_STD, rng).with_requires_grad(true),
        )?;
        let in_proj = Linear::new(
            store,
            &format!("{prefix}.in_proj"),
            c.feat_dim,
            c.dim,
            nn::fan_in_std(c.feat_dim),
            rng,
        )?;
        let in_ln = LayerNorm::new(store, &format!("{prefix}.in_ln"), c.dim)?;
        let pos = store.add(
            format!("{prefix}.pos"),
            normal_init(&[c.roi_size * c.roi_size, c.dim], QUERY_INIT_STD, rng).with_requires_grad(true),
        )?;
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let name = format!("{prefix}.block{l}");
            blocks.push(QBlock {
                cross: MultiHeadAttention::new(store, &format!("{name}.cross"), c.dim, c.dim, c.heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{name}.ln1"), c.dim)?,
                ff: FeedForward::new(store, &format!("{name}.ff"), c.dim, c.ff, rng)?,
                ln2: LayerNorm::new(store, &format!("{name}.ln2"), c.dim)?,
            });
        }
        Ok(Self {
            config,
            queries,
            in_proj,
            in_ln,
            pos,
            blocks,
        })
    }

    pub fn config(&self) -> QFormerConfig {
        self.config
    }

    /// Parameter ids of the value and output projections of every block.
    pub fn value_output_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [b.cross.v.w, b.cross.v.b, b.cross.o.w, b.cross.o.b])
            .collect()
    }

    /// Stacks ROI features into a `[B, R², feat_dim]` tensor.
    pub fn stack_rois(&self, rois: &[&RoiFeature]) -> Result<Tensor> {
        let c = &self.config;
        let mut data = Vec::with_capacity(rois.len() * c.roi_size * c.roi_size * c.feat_dim);
        for r in rois {
            if r.size != c.roi_size || r.dim != c.feat_dim {
                return Err(VisionError::Tensor(TensorError::ShapeMismatch {
                    op: "qformer",
                    lhs: vec![r.size, r.size, r.dim],
                    rhs: vec![c.roi_size, c.roi_size, c.feat_dim],
                }));
            }
            data.extend_from_slice(&r.data);
        }
        Ok(Tensor::new(
            vec![rois.len(), c.roi_size * c.roi_size, c.feat_dim],
            data,
        )?)
    }

    /// `rois: [B, R², feat_dim]` → `[B, Q, dim]`.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, rois: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(rois).to_vec();
        if s.len() != 3 || s[1] != c.roi_size * c.roi_size || s[2] != c.feat_dim {
            return Err(VisionError::Tensor(TensorError::ShapeMismatch {
                op: "qformer",
                lhs: s,
                rhs: vec![0, c.roi_size * c.roi_size, c.feat_dim],
            }));
        }
        let x = self.in_proj.forward(g, store, rois)?;
        let x = self.in_ln.forward(g, store, x)?;
        let pos = g.param(store, self.pos);
        let src = g.add(x, pos)?;
        let q = g.param(store, self.queries);
        let mut h = nn::tile(g, q, s[0])?;
        for b in &self.blocks {
            let a = b.cross.forward(g, store, h, src, AttnMask::None)?;
            let r = g.add(h, a)?;
            h = b.ln1.forward(g, store, r)?;
            let f = b.ff.forward(g, store, h)?;
            let r = g.add(h, f)?;
            h = b.ln2.forward(g, store, r)?;
        }
        Ok(h)
    }

    /// Inference-only embedding of a batch of regions, `[B, Q, dim]`.
    pub fn embed(&self, store: &ParamStore, rois: &[&RoiFeature]) -> Result<Tensor> {
        let t = self.stack_rois(rois)?;
        let mut g = Graph::no_grad();
        let x = g.constant(&t);
        let y = self.forward(&mut g, store, x)?;
        Ok(g.to_tensor(y))
    }
}
