use std::borrow::Cow;

use super::kernels::gemm;
use super::{check_finite, check_shape, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Key visibility rule for [`Graph::attention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Query `i` sees keys `0..prefix` and `0..=i`.
    Prefix(usize),
}

impl AttnMask {
    #[inline]
    fn visible(self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => j <= i,
            AttnMask::Prefix(p) => j < p || j <= i,
        }
    }
}

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f32]>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A recorded forward computation.
///
/// Parameters are borrowed from a [`ParamStore`] for the graph's lifetime;
/// nodes are appended in execution order, so the node list is a topological
/// order of the computation by construction.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// influence the loss.
    pub fn of(&self, var: Var) -> Vec<f32> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[var.0].iter().product()],
        }
    }

    /// Adds each parameter leaf's gradient into the matching tensor of
    /// `store`. Trainable parameters unreached by the loss get zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, p) in self.params.iter().enumerate() {
            let Some(id) = *p else { continue };
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            match &self.grads[i] {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.numel()]),
            }
        }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax over rows of length `n`.
pub(crate) fn softmax_rows(data: &mut [f32], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|x| *x *= inv);
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records no backward information (inference).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("graph values are validated on insertion")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f32>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(shape, value, op, needs_grad))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input (never receives gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        self.push_checked("constant", shape, data, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Borrows parameter `id` from `store` without copying.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let t = store.read(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            needs_grad: self.grad_enabled && t.requires_grad(),
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(mismatch("matmul", sa, sb));
        }
        let n = sb[1];
        let m = self.nodes[a.0].value.len() / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("matmul", out_shape, out, Op::MatMul(a, b), ng)
    }

    /// Elementwise sum; `b` may have a suffix of `a`'s shape and is then
    /// broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let shape = sa.to_vec();
        let bv = self.value(b);
        let out: Vec<f32> = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("add", shape, out, Op::Add(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push_checked("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        self.push_checked("scale", self.shape(x).to_vec(), out, Op::Scale(x, c), self.ng(x))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: fn(f32) -> f32, op: Op) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push_checked(name, self.shape(x).to_vec(), out, op, self.ng(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f32::abs, Op::Abs(x))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let shape = self.shape(x).to_vec();
        self.push_checked(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        softmax_rows(&mut out, n);
        self.push_checked("softmax", self.shape(x).to_vec(), out, Op::Softmax(x), self.ng(x))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::Invalid(format!("transpose expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push_checked("transpose", vec![c, r], out, Op::Transpose(x), self.ng(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape, self.value(x).len())?;
        let out = self.value(x).to_vec();
        self.push_checked("reshape", shape, out, Op::Reshape(x), self.ng(x))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push_checked(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow {start}+{len} on axis {axis} of {s:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push_checked("narrow", shape, out, Op::Narrow { x, axis, start }, self.ng(x))
    }

    /// Gathers slices along the first axis (embedding lookup, batch gather,
    /// tiling when ids repeat).
    pub fn index_select(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        if ids.is_empty() {
            return Err(TensorError::Invalid("index_select with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::TargetOutOfRange {
                index: bad,
                classes: s[0],
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(ids.len() * inner);
        for &i in ids {
            out.extend_from_slice(&v[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = ids.len();
        self.push_checked(
            "index_select",
            shape,
            out,
            Op::IndexSelect { x, ids: ids.to_vec() },
            self.ng(x),
        )
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `q: [B, Tq, D]`, `k, v: [B, Tk, D]`; heads split `D` into contiguous
    /// column blocks. Returns `[B, Tq, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 3 || sk.len() != 3 || self.shape(v) != sk.as_slice() {
            return Err(mismatch("attention", &sq, &sk));
        }
        let (b, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if sk[0] != b || sk[2] != d || heads == 0 || d % heads != 0 {
            return Err(mismatch("attention", &sq, &sk));
        }
        if mask == AttnMask::Causal && tq != tk {
            return Err(mismatch("attention(causal)", &sq, &sk));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; b * heads * tq * tk];
        let mut out = vec![0.0; b * tq * d];
        for bi in 0..b {
            for h in 0..heads {
                let qo = bi * tq * d + h * dh;
                let ko = bi * tk * d + h * dh;
                let p = &mut probs[(bi * heads + h) * tq * tk..][..tq * tk];
                gemm(tq, dh, tk, scale, &qv[qo..], (d, 1), &kv[ko..], (1, d), 0.0, p, (tk, 1));
                if mask != AttnMask::None {
                    for i in 0..tq {
                        for j in 0..tk {
                            if !mask.visible(i, j) {
                                p[i * tk + j] = f32::NEG_INFINITY;
                            }
                        }
                    }
                }
                softmax_rows(p, tk);
                gemm(
                    tq,
                    tk,
                    dh,
                    1.0,
                    p,
                    (tk, 1),
                    &vv[ko..],
                    (d, 1),
                    0.0,
                    &mut out[qo..],
                    (d, 1),
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let probs = if ng && self.grad_enabled { probs } else { Vec::new() };
        self.push_checked("attention", sq, out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = *self.shape(logits).last().unwrap();
        let lv = self.value(logits);
        let rows = lv.len() / n;
        if targets.len() != rows {
            return Err(mismatch("softmax_cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::TargetOutOfRange { index: bad, classes: n });
        }
        let mut probs = lv.to_vec();
        let mut loss = 0.0f64;
        for (r, row) in lv.chunks(n).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f32>().ln();
            loss += f64::from(lse - row[targets[r]]);
        }
        softmax_rows(&mut probs, n);
        let loss = (loss / rows as f64) as f32;
        self.push_checked(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            self.ng(logits),
        )
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against `targets` in [0,1].
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f32]) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.len() {
            return Err(mismatch("bce_with_logits", self.shape(x), &[targets.len()]));
        }
        let loss: f64 = xv
            .iter()
            .zip(targets)
            .map(|(&z, &t)| f64::from(z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum::<f64>()
            / xv.len() as f64;
        self.push_checked(
            "bce_with_logits",
            vec![1],
            vec![loss as f32],
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
            self.ng(x),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        self.push_checked("sum", vec![1], vec![s], Op::Sum(x), self.ng(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = (v.iter().map(|&v| f64::from(v)).sum::<f64>() / v.len() as f64) as f32;
        self.push_checked("mean", vec![1], vec![s], Op::Mean(x), self.ng(x))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape: shape.to_vec() });
        }
        check_finite("loss", self.value(loss))?;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite("backward", g).map_err(|_| TensorError::NonFinite {
                    op: self.op_name(Var(i)),
                })?;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            params: self.nodes.iter().map(|n| n.param).collect(),
        })
    }

    fn op_name(&self, v: Var) -> &'static str {
        match self.nodes[v.0].op {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::Attention { .. } => "attention",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn backprop_node(&self, node: &Node<'_>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        // Returns the gradient buffer of `v`, allocating zeros on first use,
        // or None when `v` does not need a gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let n = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| -> &[f32] { &nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = *nodes[b.0].shape.first().unwrap();
                let n = nodes[b.0].shape[1];
                let m = g.len() / n;
                if let Some(ga) = acc!(*a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, 1.0, g, (n, 1), val(*b), (1, n), 1.0, ga, (k, 1));
                }
                if let Some(gb) = acc!(*b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, 1.0, val(*a), (1, k), g, (n, 1), 1.0, gb, (n, 1));
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc!(*a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((a, b), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *a += b * gelu_grad(xv);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((a, b), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > 0.0 {
                            *a += b;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((a, b), &y) in gx.iter_mut().zip(g).zip(node.value.iter()) {
                        *a += b * y * (1.0 - y);
                    }
                }
            }
            Op::Abs(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((a, b), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *a += b * if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let gv = val(*gain);
                if let Some(gg) = acc!(*gain) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = acc!(*bias) {
                    for row_g in g.chunks(d) {
                        gb.iter_mut().zip(row_g).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dh = vec![0.0; d];
                    for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = row_g[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f32>() / d as f32;
                        let mean_dh_h = dh.iter().zip(row_h).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = acc!(*x) {
                    let n = *node.shape.last().unwrap();
                    for ((out, row_g), row_y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let dot: f32 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] += row_y[j] * (row_g[j] - dot);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = acc!(*x) {
                    let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].shape[*axis];
                    if let Some(gp) = acc!(p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            let dst = &mut gp[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if let Some(gx) = acc!(*x) {
                    let (outer, n, inner) = split_axis(&nodes[x.0].shape, *axis);
                    let len = node.shape[*axis];
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..][..len * inner];
                        let src = &g[o * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::IndexSelect { x, ids } => {
                if let Some(gx) = acc!(*x) {
                    let inner = g.len() / ids.len();
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut gx[i * inner..(i + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[r * inner..(r + 1) * inner])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (b, tq, d) = (node.shape[0], node.shape[1], node.shape[2]);
                let tk = nodes[k.0].shape[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = nodes[q.0].needs_grad.then(|| vec![0.0; qv.len()]);
                let mut dk = nodes[k.0].needs_grad.then(|| vec![0.0; kv.len()]);
                let mut dv = nodes[v.0].needs_grad.then(|| vec![0.0; vv.len()]);
                let mut dp = vec![0.0; tq * tk];
                for bi in 0..b {
                    for h in 0..*heads {
                        let qo = bi * tq * d + h * dh;
                        let ko = bi * tk * d + h * dh;
                        let p = &probs[(bi * heads + h) * tq * tk..][..tq * tk];
                        if let Some(dv) = dv.as_mut() {
                            // dV = Pᵀ · dO
                            gemm(
                                tk,
                                tq,
                                dh,
                                1.0,
                                p,
                                (1, tk),
                                &g[qo..],
                                (d, 1),
                                1.0,
                                &mut dv[ko..],
                                (d, 1),
                            );
                        }
                        // dP = dO · Vᵀ
                        gemm(
                            tq,
                            dh,
                            tk,
                            1.0,
                            &g[qo..],
                            (d, 1),
                            &vv[ko..],
                            (1, d),
                            0.0,
                            &mut dp,
                            (tk, 1),
                        );
                        for i in 0..tq {
                            let prow = &p[i * tk..(i + 1) * tk];
                            let drow = &mut dp[i * tk..(i + 1) * tk];
                            let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..tk {
                                drow[j] = prow[j] * (drow[j] - dot) * scale;
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            gemm(
                                tq,
                                tk,
                                dh,
                                1.0,
                                &dp,
                                (tk, 1),
                                &kv[ko..],
                                (d, 1),
                                1.0,
                                &mut dq[qo..],
                                (d, 1),
                            );
                        }
                        if let Some(dk) = dk.as_mut() {
                            gemm(
                                tk,
                                tq,
                                dh,
                                1.0,
                                &dp,
                                (1, tk),
                                &qv[qo..],
                                (d, 1),
                                1.0,
                                &mut dk[ko..],
                                (d, 1),
                            );
                        }
                    }
                }
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(local), Some(dst)) = (local, acc!(var)) {
                        dst.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if let Some(gl) = acc!(*logits) {
                    let n = probs.len() / targets.len();
                    let c = g[0] / targets.len() as f32;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * n..(r + 1) * n];
                        for j in 0..n {
                            row[j] += c * probs[r * n + j];
                        }
                        row[t] -= c;
                    }
                }
            }
            Op::BceWithLogits { x, targets } => {
                if let Some(gx) = acc!(*x) {
                    let c = g[0] / targets.len() as f32;
                    for ((a, &z), &t) in gx.iter_mut().zip(val(*x)).zip(targets) {
                        *a += c * (sigmoid(z) - t);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc!(*x) {
                    let c = g[0] / gx.len() as f32;
                    gx.iter_mut().for_each(|a| *a += c);
                }
            }
        }
    }
}
