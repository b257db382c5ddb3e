//! Category–attribute tree and the 3+1+1 hierarchical label codec.
//!
//! A label is a path through three category codebooks (A → B → C) followed
//! by one property token and one value token. Codebook tokens are indices
//! within their level: siblings carry distinct tokens, but the same B or C
//! token may appear under different parents (mixed-radix codes), so a node
//! is identified by its token path rather than its last token alone.
//!
//! The unified vocabulary places two specials first and then the five
//! codebooks in disjoint contiguous ranges:
//!
//! ```text
//! [BOS, EOS, a_0..a_|A|, b_0..b_|B|, c_0..c_|C|, p_0..p_|P|, v_0..v_|V|]
//! ```

mod codec;
pub mod presets;
mod tree;

pub use codec::TokenSeq;
pub use tree::{leaf_key, HierarchySpec, HierarchyTree, LevelSpec, NamedEntry, NodeSpec, ALL_LEAVES};

use thiserror::Error;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const NUM_SPECIALS: u32 = 2;
/// BOS + three category tokens + property + value + EOS.
pub const SEQ_LEN: usize = 7;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid hierarchy at {node}: {reason}")]
    Structure { node: String, reason: String },
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u32 },
    #[error("category path {path:?} is not parent-consistent")]
    ParentMismatch { path: Vec<u32> },
    #[error("property {property} value {value} not allowed under leaf {leaf:?}")]
    Disallowed { leaf: [u32; 3], property: u32, value: u32 },
    #[error("malformed token sequence: {0}")]
    Malformed(String),
    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),
    #[error("hierarchy document: {0}")]
    Document(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// The five codebook levels of the unified vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    A,
    B,
    C,
    Property,
    Value,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::A, Level::B, Level::C, Level::Property, Level::Value];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A label expressed with codebook tokens (level-local ids).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub path: [u32; 3],
    pub property: u32,
    pub value: u32,
}

/// A label expressed with human-readable names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct NamedLabel {
    pub category: [String; 3],
    pub property: String,
    pub value: String,
}

/// Offsets of each codebook inside the unified vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    offsets: [u32; 5],
    sizes: [u32; 5],
}

impl Vocab {
    pub fn new(sizes: [u32; 5]) -> Self {
        let mut offsets = [0; 5];
        let mut next = NUM_SPECIALS;
        for (o, s) in offsets.iter_mut().zip(sizes) {
            *o = next;
            next += s;
        }
        Self { offsets, sizes }
    }

    pub fn size(&self) -> usize {
        (NUM_SPECIALS + self.sizes.iter().sum::<u32>()) as usize
    }

    pub fn codebook_size(&self, level: Level) -> u32 {
        self.sizes[level.index()]
    }

    pub fn offset(&self, level: Level) -> u32 {
        self.offsets[level.index()]
    }

    /// Unified token id of codebook token `local` at `level`.
    pub fn token(&self, level: Level, local: u32) -> u32 {
        debug_assert!(local < self.sizes[level.index()]);
        self.offsets[level.index()] + local
    }

    /// Inverse of [`Vocab::token`]; `None` for specials and out-of-range ids.
    pub fn split(&self, token: u32) -> Option<(Level, u32)> {
        Level::ALL.into_iter().find_map(|l| {
            let (o, s) = (self.offsets[l.index()], self.sizes[l.index()]);
            (token >= o && token < o + s).then(|| (l, token - o))
        })
    }

    /// Token range `[start, end)` of a codebook.
    pub fn range(&self, level: Level) -> std::ops::Range<u32> {
        let o = self.offsets[level.index()];
        o..o + self.sizes[level.index()]
    }
}

#[cfg(test)]
mod tests;
