//! Checkpoint file: `UDGF`, a version byte, a little-endian `u64` header
//! length, the JSON header, then every array as little-endian `f32` in
//! header order.

use std::io::Write;
use std::path::Path;

use detgen::hiercodec::HierarchySpec;
use detgen::tensor::{Adam, AdamConfig, AdamState, ParamStore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"UDGF";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("component {component}: {reason}")]
    Mismatch { component: String, reason: String },
    #[error("checkpoint has no {0} component")]
    MissingComponent(&'static str),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Adam moments parallel to a component's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub steps: Vec<u64>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Parameters of one trained sub-model and its training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub epochs_done: usize,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
}

impl Component {
    /// Snapshots `store` (and `adam`, which must have been built on it).
    pub fn capture(store: &ParamStore, adam: Option<&Adam>, epochs_done: usize) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let optimizer = adam.map(|a| OptimizerState {
            config: a.config,
            steps: a.states.iter().map(|s| s.t).collect(),
            m: a.states.iter().map(|s| s.m.clone()).collect(),
            v: a.states.iter().map(|s| s.v.clone()).collect(),
        });
        Self {
            epochs_done,
            params,
            optimizer,
        }
    }

    /// Overwrites every parameter of a freshly built `store` (same names,
    /// order and shapes) and rebuilds the optimizer if one was saved.
    pub fn restore(&self, store: &mut ParamStore, component: &str) -> Result<Option<Adam>> {
        let mismatch = |reason: String| CheckpointError::Mismatch {
            component: component.to_string(),
            reason,
        };
        if store.len() != self.params.len() {
            return Err(mismatch(format!(
                "model has {} parameters, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, p) in ids.into_iter().zip(&self.params) {
            if store.name(id) != p.name || store.get(id).shape() != p.shape.as_slice() {
                return Err(mismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    p.name,
                    p.shape
                )));
            }
            store.get_mut(id).data_mut().copy_from_slice(&p.data);
        }
        Ok(self.optimizer.as_ref().map(|o| {
            let mut adam = Adam::new(store, o.config);
            for (i, s) in adam.states.iter_mut().enumerate() {
                *s = AdamState {
                    m: o.m[i].clone(),
                    v: o.v[i].clone(),
                    t: o.steps[i],
                    config: o.config,
                };
            }
            adam
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub hierarchy: HierarchySpec,
    pub semantic: Option<Component>,
    pub detector: Option<Component>,
}

#[derive(Serialize, Deserialize)]
struct ArrayDoc {
    name: String,
    shape: Vec<usize>,
    /// In `f32` elements from the start of the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerDoc {
    config: AdamConfig,
    steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct ComponentDoc {
    name: String,
    epochs_done: usize,
    optimizer: Option<OptimizerDoc>,
    /// Parameters, then (with an optimizer) first moments, then second
    /// moments, each in parameter order.
    arrays: Vec<ArrayDoc>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    hierarchy: HierarchySpec,
    components: Vec<ComponentDoc>,
}

const SEMANTIC: &str = "semantic";
const DETECTOR: &str = "detector";

impl Checkpoint {
    pub fn semantic(&self) -> Result<&Component> {
        self.semantic
            .as_ref()
            .ok_or(CheckpointError::MissingComponent(SEMANTIC))
    }

    pub fn detector(&self) -> Result<&Component> {
        self.detector
            .as_ref()
            .ok_or(CheckpointError::MissingComponent(DETECTOR))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload: Vec<f32> = Vec::new();
        let mut components = Vec::new();
        for (name, c) in [(SEMANTIC, &self.semantic), (DETECTOR, &self.detector)] {
            let Some(c) = c else { continue };
            let mut arrays = Vec::new();
            let mut push = |name: String, shape: &[usize], data: &[f32]| {
                arrays.push(ArrayDoc {
                    name,
                    shape: shape.to_vec(),
                    offset: payload.len() as u64,
                });
                payload.extend_from_slice(data);
            };
            for p in &c.params {
                push(p.name.clone(), &p.shape, &p.data);
            }
            if let Some(o) = &c.optimizer {
                for (p, m) in c.params.iter().zip(&o.m) {
                    push(format!("{}#m", p.name), &p.shape, m);
                }
                for (p, v) in c.params.iter().zip(&o.v) {
                    push(format!("{}#v", p.name), &p.shape, v);
                }
            }
            components.push(ComponentDoc {
                name: name.to_string(),
                epochs_done: c.epochs_done,
                optimizer: c.optimizer.as_ref().map(|o| OptimizerDoc {
                    config: o.config,
                    steps: o.steps.clone(),
                }),
                arrays,
            });
        }
        let header = Header {
            config: self.config.clone(),
            hierarchy: self.hierarchy.clone(),
            components,
        };
        let text = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(13 + text.len() + 4 * payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for x in payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = *bytes.get(4).ok_or(CheckpointError::Truncated("version"))?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len_bytes: [u8; 8] = bytes
            .get(5..13)
            .ok_or(CheckpointError::Truncated("header length"))?
            .try_into()
            .expect("eight bytes");
        let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| CheckpointError::Truncated("header"))?;
        let text = bytes
            .get(13..13usize.saturating_add(len))
            .ok_or(CheckpointError::Truncated("header"))?;
        let header: Header = serde_json::from_slice(text).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[13 + len..];
        if !payload.len().is_multiple_of(4) {
            return Err(CheckpointError::Truncated("payload"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let mut cursor = 0u64;
        let mut take = |a: &ArrayDoc| -> Result<Vec<f32>> {
            let n: usize = a.shape.iter().product();
            if a.offset != cursor {
                return Err(CheckpointError::Header(format!("array {} is not contiguous", a.name)));
            }
            let start = cursor as usize;
            let data = floats
                .get(start..start + n)
                .ok_or(CheckpointError::Truncated("payload"))?
                .to_vec();
            cursor += n as u64;
            Ok(data)
        };
        let mut ckpt = Checkpoint {
            config: header.config,
            hierarchy: header.hierarchy,
            semantic: None,
            detector: None,
        };
        for doc in &header.components {
            let has_opt = doc.optimizer.is_some();
            let count = if has_opt {
                doc.arrays.len() / 3
            } else {
                doc.arrays.len()
            };
            if has_opt && doc.arrays.len() % 3 != 0 {
                return Err(CheckpointError::Header(format!(
                    "component {}: optimizer arrays incomplete",
                    doc.name
                )));
            }
            let mut params = Vec::with_capacity(count);
            for a in &doc.arrays[..count] {
                params.push(NamedArray {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: take(a)?,
                });
            }
            let optimizer = match &doc.optimizer {
                None => None,
                Some(o) => {
                    if o.steps.len() != count {
                        return Err(CheckpointError::Header(format!(
                            "component {}: step count mismatch",
                            doc.name
                        )));
                    }
                    let mut m = Vec::with_capacity(count);
                    let mut v = Vec::with_capacity(count);
                    for (i, a) in doc.arrays[count..].iter().enumerate() {
                        let p = &params[i % count];
                        let suffix = if i < count { "#m" } else { "#v" };
                        if a.name != format!("{}{suffix}", p.name) || a.shape != p.shape {
                            return Err(CheckpointError::Header(format!(
                                "unexpected optimizer array {}",
                                a.name
                            )));
                        }
                        if i < count {
                            m.push(take(a)?)
                        } else {
                            v.push(take(a)?)
                        }
                    }
                    Some(OptimizerState {
                        config: o.config,
                        steps: o.steps.clone(),
                        m,
                        v,
                    })
                }
            };
            let c = Component {
                epochs_done: doc.epochs_done,
                params,
                optimizer,
            };
            let slot = match doc.name.as_str() {
                SEMANTIC => &mut ckpt.semantic,
                DETECTOR => &mut ckpt.detector,
                other => return Err(CheckpointError::Header(format!("unknown component {other}"))),
            };
            if slot.replace(c).is_some() {
                return Err(CheckpointError::Header(format!("duplicate component {}", doc.name)));
            }
        }
        if cursor as usize != floats.len() {
            return Err(CheckpointError::Header("trailing payload".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
