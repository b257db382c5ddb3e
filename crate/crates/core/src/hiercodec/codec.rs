use super::{CodecError, HierarchyTree, Label, Level, Result, BOS, EOS, SEQ_LEN};

/// A full `[BOS, a, b, c, p, v, EOS]` sequence in unified-vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    /// Wraps raw ids without validation; use [`HierarchyTree::decode_tokens`]
    /// to check them.
    pub fn from_raw(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Payload position → codebook level.
const PAYLOAD_LEVELS: [Level; 5] = [Level::A, Level::B, Level::C, Level::Property, Level::Value];

impl HierarchyTree {
    pub fn encode_label(&self, label: &Label) -> Result<TokenSeq> {
        self.check_label(label)?;
        let v = self.vocab();
        Ok(TokenSeq(vec![
            BOS,
            v.token(Level::A, label.path[0]),
            v.token(Level::B, label.path[1]),
            v.token(Level::C, label.path[2]),
            v.token(Level::Property, label.property),
            v.token(Level::Value, label.value),
            EOS,
        ]))
    }

    pub fn decode_tokens(&self, seq: &TokenSeq) -> Result<Label> {
        let t = seq.tokens();
        if t.len() != SEQ_LEN {
            return Err(CodecError::Malformed(format!(
                "expected {SEQ_LEN} tokens (BOS + 3+1+1 payload + EOS), got {}",
                t.len()
            )));
        }
        if t[0] != BOS || t[SEQ_LEN - 1] != EOS {
            return Err(CodecError::Malformed(
                "sequence must start with BOS and end with EOS".into(),
            ));
        }
        let mut local = [0u32; 5];
        for (i, level) in PAYLOAD_LEVELS.iter().enumerate() {
            match self.vocab().split(t[i + 1]) {
                Some((l, id)) if l == *level => local[i] = id,
                _ => {
                    return Err(CodecError::Malformed(format!(
                        "token {} at payload position {i} is not a {level:?} token",
                        t[i + 1]
                    )))
                }
            }
        }
        let label = Label {
            path: [local[0], local[1], local[2]],
            property: local[3],
            value: local[4],
        };
        self.check_label(&label)?;
        Ok(label)
    }

    /// Unified ids that may follow `prefix` (which starts with BOS), sorted.
    pub fn valid_next_tokens(&self, prefix: &[u32]) -> Result<Vec<u32>> {
        let v = self.vocab();
        let bad = |why: String| CodecError::InvalidPrefix(why);
        if prefix.first() != Some(&BOS) {
            return Err(bad("prefix must start with BOS".into()));
        }
        if prefix.len() >= SEQ_LEN {
            return Err(bad(format!("prefix of length {} is already complete", prefix.len())));
        }
        let mut local = Vec::with_capacity(5);
        for (i, &tok) in prefix[1..].iter().enumerate() {
            match v.split(tok) {
                Some((l, id)) if l == PAYLOAD_LEVELS[i] => local.push(id),
                _ => return Err(bad(format!("token {tok} invalid at payload position {i}"))),
            }
        }
        let map = |level: Level, ids: &[u32]| ids.iter().map(|&i| v.token(level, i)).collect::<Vec<_>>();
        let next = match local.len() {
            0 => self.a_tokens().map(|a| v.token(Level::A, a)).collect(),
            1 => map(
                Level::B,
                self.b_children(local[0])
                    .ok_or_else(|| bad(format!("unknown A token {}", local[0])))?,
            ),
            2 => map(
                Level::C,
                self.c_children(local[0], local[1])
                    .ok_or_else(|| bad(format!("B token {} is not a child of A {}", local[1], local[0])))?,
            ),
            3 => {
                let leaf = [local[0], local[1], local[2]];
                let allow = self
                    .allowances(leaf)
                    .ok_or_else(|| bad(format!("path {leaf:?} is not a leaf")))?;
                allow.keys().map(|&p| v.token(Level::Property, p)).collect()
            }
            4 => {
                let leaf = [local[0], local[1], local[2]];
                self.allowances(leaf)
                    .ok_or_else(|| bad(format!("path {leaf:?} is not a leaf")))?;
                let vals = self.allowed_values(leaf, local[3]);
                if vals.is_empty() {
                    return Err(bad(format!("property {} not allowed at leaf {leaf:?}", local[3])));
                }
                map(Level::Value, vals)
            }
            _ => {
                let label = Label {
                    path: [local[0], local[1], local[2]],
                    property: local[3],
                    value: local[4],
                };
                self.check_label(&label).map_err(|e| bad(e.to_string()))?;
                vec![EOS]
            }
        };
        Ok(next)
    }
}
