//! Autoregressive label generator conditioned on object embeddings.
//!
//! Two architectures share one interface. The encoder–decoder variant feeds
//! the projected object tokens through a bidirectional encoder and lets a
//! causal decoder cross-attend to the result. The decoder-only variant
//! prepends the projected object tokens to the label tokens inside a single
//! causal stack whose prefix segment is mutually visible.

mod beam;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hiercodec::{CodecError, TokenSeq, BOS, SEQ_LEN};
use crate::nn::{self, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{normal_init, Adam, AttnMask, Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::vision::{QFormer, RoiFeature, VisionError};

pub use beam::{
    beam_search, property_conditioned_decode, ConditionedOutcome, Hypothesis, NextTokenScorer, ObjectScorer,
};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("prefix of length {len} exceeds the maximum sequence length {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    VocabMismatch { token: u32, vocab: usize },
    #[error("invalid target sequence: {0}")]
    InvalidTarget(String),
    #[error("no valid continuation for prefix {0:?}")]
    DeadEnd(Vec<u32>),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vision(#[from] VisionError),
}

pub type Result<T> = std::result::Result<T, GeneratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub architecture: Architecture,
    pub dim: usize,
    /// Encoder layers; the decoder-only variant stacks `enc_layers +
    /// dec_layers` causal layers.
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Number of object tokens (Q-Former queries).
    pub obj_tokens: usize,
    /// Width of the object tokens.
    pub obj_dim: usize,
}

impl GeneratorConfig {
    pub fn new(architecture: Architecture, vocab_size: usize, obj_tokens: usize, obj_dim: usize) -> Self {
        Self {
            architecture,
            dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff: 256,
            vocab_size,
            max_len: SEQ_LEN,
            obj_tokens,
            obj_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.dim > 0
            && self.heads > 0
            && self.dim.is_multiple_of(self.heads)
            && self.ff > 0
            && self.vocab_size > 2
            && self.max_len >= 2
            && self.obj_tokens > 0
            && self.obj_dim > 0
            && self.enc_layers + self.dec_layers > 0
            && (self.architecture == Architecture::DecoderOnly || self.dec_layers > 0);
        if ok {
            Ok(())
        } else {
            Err(GeneratorError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross: Option<(MultiHeadAttention, LayerNorm)>,
    ff: FeedForward,
    ln2: LayerNorm,
}

/// Per-object conditioning computed once and reused for every sequence of
/// that object: encoder cross-attention keys/values per decoder layer, or
/// the prefix segment for the decoder-only stack.
#[derive(Debug, Clone)]
pub enum Context<T> {
    CrossKv(Vec<(T, T)>),
    Prefix(T),
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    in_proj: Linear,
    obj_pos: ParamId,
    tok_emb: ParamId,
    tok_pos: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    head: Linear,
}

fn post_norm<'p>(g: &mut Graph<'p>, store: &'p ParamStore, ln: &LayerNorm, x: Var, delta: Var) -> Result<Var> {
    let r = g.add(x, delta)?;
    Ok(ln.forward(g, store, r)?)
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: GeneratorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.dim;
        let in_proj = Linear::new(store, &format!("{prefix}.in_proj"), c.obj_dim, d, nn::INIT_STD, rng)?;
        let emb = |store: &mut ParamStore, name: String, rows: usize, rng: &mut R| {
            store.add(
                name,
                normal_init(&[rows, d], nn::INIT_STD, rng).with_requires_grad(true),
            )
        };
        let obj_pos = emb(store, format!("{prefix}.obj_pos"), c.obj_tokens, rng)?;
        let tok_emb = emb(store, format!("{prefix}.tok_emb"), c.vocab_size, rng)?;
        let tok_pos = emb(store, format!("{prefix}.tok_pos"), c.max_len, rng)?;
        let (n_enc, n_dec, cross) = match c.architecture {
            Architecture::EncoderDecoder => (c.enc_layers, c.dec_layers, true),
            Architecture::DecoderOnly => (0, c.enc_layers + c.dec_layers, false),
        };
        let mut encoder = Vec::with_capacity(n_enc);
        for l in 0..n_enc {
            let n = format!("{prefix}.enc{l}");
            encoder.push(EncoderBlock {
                attn: MultiHeadAttention::new(store, &format!("{n}.attn"), d, d, c.heads, rng)?,
                ln1: LayerNorm::new(store, &format!("{n}.ln1"), d)?,
                ff: FeedForward::new(store, &format!("{n}.ff"), d, c.ff, rng)?,
                ln2: LayerNorm::new(store, &format!("{n}.ln2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(n_dec);
        for l in 0..n_dec {
            let n = format!("{prefix}.dec{l}");
            let attn = MultiHeadAttention::new(store, &format!("{n}.attn"), d, d, c.heads, rng)?;
            let ln1 = LayerNorm::new(store, &format!("{n}.ln1"), d)?;
            let cross = if cross {
                Some((
                    MultiHeadAttention::new(store, &format!("{n}.cross"), d, d, c.heads, rng)?,
                    LayerNorm::new(store, &format!("{n}.lnc"), d)?,
                ))
            } else {
                None
            };
            decoder.push(DecoderBlock {
                attn,
                ln1,
                cross,
                ff: FeedForward::new(store, &format!("{n}.ff"), d, c.ff, rng)?,
                ln2: LayerNorm::new(store, &format!("{n}.ln2"), d)?,
            });
        }
        let head = Linear::new(store, &format!("{prefix}.head"), d, c.vocab_size, nn::INIT_STD, rng)?;
        Ok(Self {
            config,
            in_proj,
            obj_pos,
            tok_emb,
            tok_pos,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> GeneratorConfig {
        self.config
    }

    /// Builds the per-object context from `e_obj: [N, Q, obj_dim]`.
    pub fn context<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, e_obj: Var) -> Result<Context<Var>> {
        let c = &self.config;
        let s = g.shape(e_obj).to_vec();
        if s.len() != 3 || s[1] != c.obj_tokens || s[2] != c.obj_dim {
            return Err(TensorError::ShapeMismatch {
                op: "generator context",
                lhs: s,
                rhs: vec![0, c.obj_tokens, c.obj_dim],
            }
            .into());
        }
        let x = self.in_proj.forward(g, store, e_obj)?;
        let pos = g.param(store, self.obj_pos);
        let mut h = g.add(x, pos)?;
        if c.architecture == Architecture::DecoderOnly {
            return Ok(Context::Prefix(h));
        }
        for b in &self.encoder {
            let a = b.attn.forward(g, store, h, h, AttnMask::None)?;
            h = post_norm(g, store, &b.ln1, h, a)?;
            let f = b.ff.forward(g, store, h)?;
            h = post_norm(g, store, &b.ln2, h, f)?;
        }
        let mut kv = Vec::with_capacity(self.decoder.len());
        for b in &self.decoder {
            let (cross, _) = b.cross.as_ref().expect("encoder-decoder blocks carry cross-attention");
            kv.push(cross.project_kv(g, store, h)?);
        }
        Ok(Context::CrossKv(kv))
    }

    fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<usize> {
        let len = tokens.first().map_or(0, Vec::len);
        if len == 0 || tokens.iter().any(|t| t.len() != len) {
            return Err(GeneratorError::Config(
                "token batch must be non-empty and rectangular".into(),
            ));
        }
        if len > self.config.max_len {
            return Err(GeneratorError::PrefixTooLong {
                len,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(GeneratorError::VocabMismatch {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(len)
    }

    /// Next-token logits `[S, L, V]` for `S` token sequences of equal length
    /// `L`; sequence `s` is conditioned on object `obj_ids[s]` of `ctx`.
    pub fn logits<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        ctx: &Context<Var>,
        obj_ids: &[usize],
        tokens: &[Vec<u32>],
    ) -> Result<Var> {
        let len = self.check_tokens(tokens)?;
        if obj_ids.len() != tokens.len() {
            return Err(GeneratorError::Config("one object id per sequence".into()));
        }
        let s = tokens.len();
        let d = self.config.dim;
        let flat: Vec<usize> = tokens.iter().flatten().map(|&t| t as usize).collect();
        let table = g.param(store, self.tok_emb);
        let e = g.index_select(table, &flat)?;
        let e = g.reshape(e, [s, len, d])?;
        let pos = g.param(store, self.tok_pos);
        let pos = g.narrow(pos, 0, 0, len)?;
        let mut h = g.add(e, pos)?;
        let q = self.config.obj_tokens;
        let (mask, prefix) = match ctx {
            Context::Prefix(p) => {
                let p = g.index_select(*p, obj_ids)?;
                h = g.concat(&[p, h], 1)?;
                (AttnMask::Prefix(q), true)
            }
            Context::CrossKv(_) => (AttnMask::Causal, false),
        };
        for (l, b) in self.decoder.iter().enumerate() {
            let a = b.attn.forward(g, store, h, h, mask)?;
            h = post_norm(g, store, &b.ln1, h, a)?;
            if let (Some((cross, ln)), Context::CrossKv(kv)) = (&b.cross, ctx) {
                let k = g.index_select(kv[l].0, obj_ids)?;
                let v = g.index_select(kv[l].1, obj_ids)?;
                let a = cross.attend(g, store, h, k, v, AttnMask::None)?;
                h = post_norm(g, store, ln, h, a)?;
            }
            let f = b.ff.forward(g, store, h)?;
            h = post_norm(g, store, &b.ln2, h, f)?;
        }
        if prefix {
            h = g.narrow(h, 1, q, len)?;
        }
        Ok(self.head.forward(g, store, h)?)
    }

    /// Inference-only context for `e_obj: [N, Q, obj_dim]`, materialized so
    /// it can be reused across decoding steps.
    pub fn context_tensors(&self, store: &ParamStore, e_obj: &Tensor) -> Result<Context<Tensor>> {
        let mut g = Graph::no_grad();
        let x = g.constant(e_obj);
        Ok(match self.context(&mut g, store, x)? {
            Context::Prefix(p) => Context::Prefix(g.to_tensor(p)),
            Context::CrossKv(kv) => {
                Context::CrossKv(kv.into_iter().map(|(k, v)| (g.to_tensor(k), g.to_tensor(v))).collect())
            }
        })
    }

    /// Last-position logits for each prefix, all conditioned on object 0 of
    /// `ctx`. Prefixes must share one length.
    pub fn next_logits(
        &self,
        store: &ParamStore,
        ctx: &Context<Tensor>,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::no_grad();
        let ctx = match ctx {
            Context::Prefix(p) => Context::Prefix(g.constant(p)),
            Context::CrossKv(kv) => Context::CrossKv(kv.iter().map(|(k, v)| (g.constant(k), g.constant(v))).collect()),
        };
        let ids = vec![0; prefixes.len()];
        let logits = self.logits(&mut g, store, &ctx, &ids, prefixes)?;
        let len = prefixes[0].len();
        let v = self.config.vocab_size;
        let data = g.value(logits);
        Ok((0..prefixes.len())
            .map(|s| data[(s * len + len - 1) * v..(s * len + len) * v].to_vec())
            .collect())
    }
}

/// Q-Former and generator trained jointly on one parameter store.
#[derive(Debug, Clone)]
pub struct SemanticModel {
    pub qformer: QFormer,
    pub generator: Generator,
}

/// One object's pooled region and its target label sequences.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub roi: &'a RoiFeature,
    pub sequences: &'a [TokenSeq],
}

/// Splits full sequences into teacher-forced inputs and targets.
fn teacher_forcing(items: &[TrainItem<'_>], vocab: usize) -> Result<(Vec<usize>, Vec<Vec<u32>>, Vec<usize>)> {
    let mut obj_ids = Vec::new();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, item) in items.iter().enumerate() {
        for seq in item.sequences {
            let t = seq.tokens();
            if t.len() != SEQ_LEN || t[0] != BOS {
                return Err(GeneratorError::InvalidTarget(format!("{t:?}")));
            }
            if let Some(&bad) = t.iter().find(|&&x| x as usize >= vocab) {
                return Err(GeneratorError::VocabMismatch { token: bad, vocab });
            }
            obj_ids.push(i);
            inputs.push(t[..SEQ_LEN - 1].to_vec());
            targets.extend(t[1..].iter().map(|&x| x as usize));
        }
    }
    if inputs.is_empty() {
        return Err(GeneratorError::InvalidTarget("batch has no sequences".into()));
    }
    Ok((obj_ids, inputs, targets))
}

impl SemanticModel {
    /// Teacher-forced next-token cross-entropy over the payload and EOS
    /// positions (BOS is never predicted).
    pub fn loss<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, items: &[TrainItem<'_>]) -> Result<Var> {
        let (obj_ids, inputs, targets) = teacher_forcing(items, self.generator.config.vocab_size)?;
        let rois: Vec<&RoiFeature> = items.iter().map(|i| i.roi).collect();
        let x = g.constant(&self.qformer.stack_rois(&rois)?);
        let e = self.qformer.forward(g, store, x)?;
        let ctx = self.generator.context(g, store, e)?;
        let logits = self.generator.logits(g, store, &ctx, &obj_ids, &inputs)?;
        Ok(g.softmax_cross_entropy(logits, &targets)?)
    }

    /// Computes the loss, backpropagates and applies one optimizer step to
    /// every trainable parameter in `store`. Returns the pre-step loss.
    pub fn train_step(&self, store: &mut ParamStore, adam: &mut Adam, items: &[TrainItem<'_>]) -> Result<f32> {
        let (value, grads) = {
            let mut g = Graph::new();
            let loss = self.loss(&mut g, store, items)?;
            (g.value(loss)[0], g.backward(loss)?)
        };
        store.zero_grads();
        grads.accumulate_into(store);
        adam.step(store)?;
        Ok(value)
    }

    /// Inference contexts for a batch of regions, one per region.
    pub fn contexts(&self, store: &ParamStore, rois: &[&RoiFeature]) -> Result<Vec<Context<Tensor>>> {
        let e = self.qformer.embed(store, rois)?;
        let ctx = self.generator.context_tensors(store, &e)?;
        let n = rois.len();
        let split = |t: &Tensor| -> Result<Vec<Tensor>> {
            let shape = t.shape();
            let per = t.numel() / n;
            (0..n)
                .map(|i| {
                    Ok(Tensor::new(
                        vec![1, shape[1], shape[2]],
                        t.data()[i * per..(i + 1) * per].to_vec(),
                    )?)
                })
                .collect()
        };
        Ok(match ctx {
            Context::Prefix(p) => split(&p)?.into_iter().map(Context::Prefix).collect(),
            Context::CrossKv(kv) => {
                let mut per_obj: Vec<Vec<(Tensor, Tensor)>> = (0..n).map(|_| Vec::new()).collect();
                for (k, v) in &kv {
                    for (i, (k, v)) in split(k)?.into_iter().zip(split(v)?).enumerate() {
                        per_obj[i].push((k, v));
                    }
                }
                per_obj.into_iter().map(Context::CrossKv).collect()
            }
        })
    }
}
