use std::cmp::Ordering;

use crate::hiercodec::{HierarchyTree, Level, TokenSeq, BOS, SEQ_LEN};
use crate::tensor::{ParamStore, Tensor};

use super::{Context, Generator, GeneratorError, Result};

/// Source of next-token logits for a batch of equal-length prefixes.
pub trait NextTokenScorer {
    fn next_logits(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>>;
}

/// Scores prefixes of one object with a trained generator.
pub struct ObjectScorer<'a> {
    pub generator: &'a Generator,
    pub store: &'a ParamStore,
    pub context: &'a Context<Tensor>,
}

impl NextTokenScorer for ObjectScorer<'_> {
    fn next_logits(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        self.generator.next_logits(self.store, self.context, prefixes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of per-step log-probabilities, each normalized over the valid
    /// continuations of its prefix.
    pub logprob: f64,
}

impl Hypothesis {
    pub fn into_seq(self) -> TokenSeq {
        TokenSeq::from_raw(self.tokens)
    }
}

/// Descending score, then ascending token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Log-softmax of `logits` restricted to `valid`, in f64.
fn masked_log_softmax(logits: &[f32], valid: &[u32]) -> Vec<f64> {
    let xs: Vec<f64> = valid.iter().map(|&t| f64::from(logits[t as usize])).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Expands `beams` for `steps` constrained steps keeping the best `k`.
fn expand<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    tree: &HierarchyTree,
    mut beams: Vec<Hypothesis>,
    steps: usize,
    k: usize,
) -> Result<Vec<Hypothesis>> {
    for _ in 0..steps {
        let prefixes: Vec<Vec<u32>> = beams.iter().map(|h| h.tokens.clone()).collect();
        let logits = scorer.next_logits(&prefixes)?;
        let mut next = Vec::new();
        for (h, row) in beams.iter().zip(&logits) {
            let valid = tree.valid_next_tokens(&h.tokens)?;
            if valid.is_empty() {
                return Err(GeneratorError::DeadEnd(h.tokens.clone()));
            }
            for (&t, lp) in valid.iter().zip(masked_log_softmax(row, &valid)) {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                next.push(Hypothesis {
                    tokens,
                    logprob: h.logprob + lp,
                });
            }
        }
        next.sort_by(rank);
        next.truncate(k);
        beams = next;
    }
    Ok(beams)
}

fn check_widths(k: usize, m: usize) -> Result<()> {
    if k == 0 || m == 0 || m > k {
        return Err(GeneratorError::Config(format!(
            "beam width {k} and top-m {m} need 1 <= m <= k"
        )));
    }
    Ok(())
}

/// Trie-constrained beam search from BOS to EOS. Returns the best `m` of
/// the final `k` beams, ranked by total log-probability with ties broken
/// by the lower token sequence.
pub fn beam_search<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    tree: &HierarchyTree,
    k: usize,
    m: usize,
) -> Result<Vec<Hypothesis>> {
    check_widths(k, m)?;
    let start = vec![Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
    }];
    let mut beams = expand(scorer, tree, start, SEQ_LEN - 1, k)?;
    beams.truncate(m);
    Ok(beams)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionedOutcome {
    Value {
        path: [u32; 3],
        value: u32,
        /// Category log-probability plus the value step; the forced
        /// property step contributes nothing.
        logprob: f64,
    },
    /// The decoded leaf allows no values for the requested property.
    NoAttribute { path: [u32; 3], logprob: f64 },
}

impl ConditionedOutcome {
    pub fn path(&self) -> [u32; 3] {
        match *self {
            ConditionedOutcome::Value { path, .. } | ConditionedOutcome::NoAttribute { path, .. } => path,
        }
    }
}

/// Decodes the category path by beam search of width `k`, forces the
/// property token `property` (codebook id) and picks the most likely value
/// allowed under the decoded leaf.
pub fn property_conditioned_decode<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    tree: &HierarchyTree,
    property: u32,
    k: usize,
) -> Result<ConditionedOutcome> {
    check_widths(k, 1)?;
    let vocab = tree.vocab();
    if property >= vocab.codebook_size(Level::Property) {
        return Err(crate::hiercodec::CodecError::UnknownId {
            kind: "property",
            id: property,
        }
        .into());
    }
    let start = vec![Hypothesis {
        tokens: vec![BOS],
        logprob: 0.0,
    }];
    let best = expand(scorer, tree, start, 3, k)?.into_iter().next().expect("k >= 1");
    let path = [
        best.tokens[1] - vocab.offset(Level::A),
        best.tokens[2] - vocab.offset(Level::B),
        best.tokens[3] - vocab.offset(Level::C),
    ];
    let allowed = tree.allowed_values(path, property);
    if allowed.is_empty() {
        return Ok(ConditionedOutcome::NoAttribute {
            path,
            logprob: best.logprob,
        });
    }
    let mut prefix = best.tokens.clone();
    prefix.push(vocab.token(Level::Property, property));
    let logits = scorer.next_logits(&[prefix])?;
    let valid: Vec<u32> = allowed.iter().map(|&v| vocab.token(Level::Value, v)).collect();
    let lps = masked_log_softmax(&logits[0], &valid);
    // First maximum wins, so ties go to the lower value id.
    let (i, lp) = lps.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, &lp)| if lp > acc.1 { (i, lp) } else { acc },
    );
    Ok(ConditionedOutcome::Value {
        path,
        value: allowed[i],
        logprob: best.logprob + lp,
    })
}
