//! Parameterized layers shared by the Q-Former, generator and detector.

use rand::Rng;

use crate::tensor::{normal_init, AttnMask, Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Standard deviation used for weight matrices and embeddings.
pub const INIT_STD: f32 = 0.02;

/// Variance-preserving standard deviation for a projection from `fan_in`
/// inputs.
pub fn fan_in_std(fan_in: usize) -> f32 {
    (1.0 / fan_in as f32).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            normal_init(&[input, output], std, rng).with_requires_grad(true),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([output]).with_requires_grad(true))?;
        Ok(Self { w, b })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.g"), Tensor::full([dim], 1.0).with_requires_grad(true))?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros([dim]).with_requires_grad(true))?;
        Ok(Self { gain, bias })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, fan_in_std(dim), rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, fan_in_std(hidden), rng)?,
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Queries come from a `dim`-wide stream, keys/values from a `kv_dim`-wide one.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, fan_in_std(dim), rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, fan_in_std(kv_dim), rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, fan_in_std(kv_dim), rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, fan_in_std(dim), rng)?,
            heads,
        })
    }

    /// Projects a key/value source once so it can be shared (e.g. gathered
    /// for several query batches).
    pub fn project_kv<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, src: Var) -> Result<(Var, Var)> {
        Ok((self.k.forward(g, store, src)?, self.v.forward(g, store, src)?))
    }

    pub fn attend<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        x: Var,
        k: Var,
        v: Var,
        mask: AttnMask,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.o.forward(g, store, a)
    }

    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        x: Var,
        src: Var,
        mask: AttnMask,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(g, store, src)?;
        self.attend(g, store, x, k, v, mask)
    }
}

/// Tiles a `[T, D]` tensor to `[batch, T, D]`.
pub fn tile<'p>(g: &mut Graph<'p>, x: Var, batch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let one = g.reshape(x, [1, s[0], s[1]])?;
    g.index_select(one, &vec![0; batch])
}
