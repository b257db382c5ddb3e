//! Structure-only hierarchies with the codebook geometries of three public
//! label inventories. Node names are placeholders (`a3`, `b1`, `c7`, ...);
//! only the codebook sizes and label counts are meaningful.

use std::collections::BTreeMap;

use super::tree::{LevelSpec, NamedEntry, NodeSpec, ALL_LEAVES};
use super::{CodecError, HierarchySpec, Result};

/// Codebook geometry of a hierarchy preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    /// Codebook sizes of the A, B and C category levels.
    pub category_sizes: [u32; 3],
    /// Number of leaf categories.
    pub leaves: u32,
    /// Codebook sizes of the property and value levels.
    pub attribute_sizes: [u32; 2],
    /// Number of distinct (property, value) attributes.
    pub attributes: u32,
}

pub const MSCOCO: Geometry = Geometry {
    category_sizes: [9, 4, 10],
    leaves: 80,
    attribute_sizes: [11, 56],
    attributes: 196,
};

pub const OBJECTS365: Geometry = Geometry {
    category_sizes: [13, 5, 26],
    leaves: 365,
    attribute_sizes: [44, 71],
    attributes: 645,
};

pub const PRODUCTS7417: Geometry = Geometry {
    category_sizes: [35, 43, 115],
    leaves: 7417,
    attribute_sizes: [4, 173],
    attributes: 228,
};

pub fn by_name(name: &str) -> Option<Geometry> {
    match name {
        "mscoco" => Some(MSCOCO),
        "objects365" => Some(OBJECTS365),
        "products7417" => Some(PRODUCTS7417),
        _ => None,
    }
}

fn lcm(a: u32, b: u32) -> u32 {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

/// Distributes `total` children over `parents` slots, each holding between
/// 1 and `cap`, with the first slot filled to `cap` so that every codebook
/// token is used.
fn spread(parents: usize, cap: u32, total: u32) -> Option<Vec<u32>> {
    if parents == 0 || total < cap + parents as u32 - 1 || total > cap * parents as u32 {
        return None;
    }
    let mut counts = vec![1u32; parents];
    counts[0] = cap;
    let mut left = total - counts.iter().sum::<u32>();
    let mut i = 1 % parents;
    while left > 0 {
        if counts[i] < cap {
            counts[i] += 1;
            left -= 1;
        }
        i = (i + 1) % parents;
    }
    Some(counts)
}

/// Builds a structure-only hierarchy document for `g`.
///
/// Category codes are mixed-radix: B and C tokens are reused across
/// parents. Attribute `i` is the pair `(i mod |P|, i mod |V|)`, allowed at
/// every leaf.
pub fn geometry_spec(g: Geometry) -> Result<HierarchySpec> {
    let [na, nb, nc] = g.category_sizes;
    let [np, nv] = g.attribute_sizes;
    let infeasible = |what: &str| CodecError::Structure {
        node: "preset".into(),
        reason: format!("geometry {g:?} cannot host {what}"),
    };
    // Use just enough B nodes that each holds about half a C codebook.
    let per_b = nc.div_ceil(2).max(1);
    let nb_nodes = g.leaves.div_ceil(per_b).clamp(na + nb - 1, na * nb);
    let b_counts = spread(na as usize, nb, nb_nodes).ok_or_else(|| infeasible("B nodes"))?;
    let c_counts = spread(nb_nodes as usize, nc, g.leaves).ok_or_else(|| infeasible("leaves"))?;
    let mut nodes = Vec::new();
    let mut b_paths = Vec::new();
    for a in 0..na {
        nodes.push(NodeSpec {
            level: 0,
            id: a,
            name: format!("a{a}"),
            parent: vec![],
        });
        for b in 0..b_counts[a as usize] {
            nodes.push(NodeSpec {
                level: 1,
                id: b,
                name: format!("b{b}"),
                parent: vec![a],
            });
            b_paths.push((a, b));
        }
    }
    for (i, &(a, b)) in b_paths.iter().enumerate() {
        for c in 0..c_counts[i] {
            nodes.push(NodeSpec {
                level: 2,
                id: c,
                name: format!("c{c}"),
                parent: vec![a, b],
            });
        }
    }
    // (i mod |P|, i mod |V|) repeats with period lcm(|P|, |V|).
    if g.attributes > lcm(np, nv) || g.attributes < np.max(nv) {
        return Err(infeasible("attributes"));
    }
    let mut allow: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for i in 0..g.attributes {
        allow
            .entry(format!("p{}", i % np))
            .or_default()
            .push(format!("v{}", i % nv));
    }
    let entries = |prefix: &str, n: u32| -> Vec<NamedEntry> {
        (0..n)
            .map(|id| NamedEntry {
                id,
                name: format!("{prefix}{id}"),
            })
            .collect()
    };
    Ok(HierarchySpec {
        levels: [
            LevelSpec {
                name: "level1".into(),
                size: na,
            },
            LevelSpec {
                name: "level2".into(),
                size: nb,
            },
            LevelSpec {
                name: "level3".into(),
                size: nc,
            },
        ],
        nodes,
        properties: entries("p", np),
        values: entries("v", nv),
        allowances: BTreeMap::from([(ALL_LEAVES.to_string(), allow)]),
    })
}

/// Bounds for [`random_spec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomTreeParams {
    pub max_children: u32,
    pub max_a: u32,
    pub max_properties: u32,
    pub max_values: u32,
}

impl Default for RandomTreeParams {
    fn default() -> Self {
        Self {
            max_children: 4,
            max_a: 4,
            max_properties: 3,
            max_values: 5,
        }
    }
}

/// Random non-empty subset of `0..n` as a sorted list.
fn random_subset<R: rand::Rng + ?Sized>(rng: &mut R, n: u32) -> Vec<u32> {
    let mut out: Vec<u32> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    if out.is_empty() {
        out.push(rng.random_range(0..n));
    }
    out
}

/// A random valid hierarchy for fuzzing. Child tokens are random subsets of
/// each codebook (patched so every token is used), and every leaf allows a
/// random non-empty set of properties with non-empty value sets.
pub fn random_spec<R: rand::Rng + ?Sized>(rng: &mut R, p: RandomTreeParams) -> HierarchySpec {
    let na = rng.random_range(1..=p.max_a);
    let nb = rng.random_range(1..=p.max_children);
    let nc = rng.random_range(1..=p.max_children);
    let np = rng.random_range(1..=p.max_properties);
    let nv = rng.random_range(1..=p.max_values);

    let mut a_children: Vec<Vec<u32>> = (0..na).map(|_| random_subset(rng, nb)).collect();
    for b in 0..nb {
        if !a_children.iter().any(|c| c.contains(&b)) {
            let a = rng.random_range(0..na) as usize;
            a_children[a].push(b);
            a_children[a].sort_unstable();
        }
    }
    let b_paths: Vec<(u32, u32)> = a_children
        .iter()
        .enumerate()
        .flat_map(|(a, bs)| bs.iter().map(move |&b| (a as u32, b)))
        .collect();
    let mut b_children: Vec<Vec<u32>> = b_paths.iter().map(|_| random_subset(rng, nc)).collect();
    for c in 0..nc {
        if !b_children.iter().any(|k| k.contains(&c)) {
            let i = rng.random_range(0..b_paths.len());
            b_children[i].push(c);
            b_children[i].sort_unstable();
        }
    }
    let mut nodes = Vec::new();
    for a in 0..na {
        nodes.push(NodeSpec {
            level: 0,
            id: a,
            name: format!("A{a}"),
            parent: vec![],
        });
    }
    let mut allowances = BTreeMap::new();
    for (i, &(a, b)) in b_paths.iter().enumerate() {
        nodes.push(NodeSpec {
            level: 1,
            id: b,
            name: format!("B{b}"),
            parent: vec![a],
        });
        for &c in &b_children[i] {
            nodes.push(NodeSpec {
                level: 2,
                id: c,
                name: format!("C{c}"),
                parent: vec![a, b],
            });
            let mut props = BTreeMap::new();
            for prop in random_subset(rng, np) {
                let vals = random_subset(rng, nv).into_iter().map(|v| format!("V{v}")).collect();
                props.insert(format!("P{prop}"), vals);
            }
            allowances.insert(super::tree::leaf_key([a, b, c]), props);
        }
    }
    let entries = |prefix: &str, n: u32| -> Vec<NamedEntry> {
        (0..n)
            .map(|id| NamedEntry {
                id,
                name: format!("{prefix}{id}"),
            })
            .collect()
    };
    HierarchySpec {
        levels: [
            LevelSpec {
                name: "A".into(),
                size: na,
            },
            LevelSpec {
                name: "B".into(),
                size: nb,
            },
            LevelSpec {
                name: "C".into(),
                size: nc,
            },
        ],
        nodes,
        properties: entries("P", np),
        values: entries("V", nv),
        allowances,
    }
}

/// Small fixed tree with |A|=3, |B|=6, |C|=12, |P|=2, |V|=6 and unique
/// tokens per node. Every leaf allows `p0 ∈ {v0, v1, v2}`; leaves with an
/// even C token also allow `p1 ∈ {v3, v4, v5}` (54 labels).
pub fn tiny_spec() -> HierarchySpec {
    let mut nodes = Vec::new();
    let mut allowances = BTreeMap::new();
    let vals = |r: std::ops::Range<u32>| r.map(|v| format!("v{v}")).collect::<Vec<_>>();
    for a in 0..3u32 {
        nodes.push(NodeSpec {
            level: 0,
            id: a,
            name: format!("a{a}"),
            parent: vec![],
        });
        for b in 2 * a..2 * a + 2 {
            nodes.push(NodeSpec {
                level: 1,
                id: b,
                name: format!("b{b}"),
                parent: vec![a],
            });
            for c in 2 * b..2 * b + 2 {
                nodes.push(NodeSpec {
                    level: 2,
                    id: c,
                    name: format!("c{c}"),
                    parent: vec![a, b],
                });
                let mut props = BTreeMap::from([("p0".to_string(), vals(0..3))]);
                if c % 2 == 0 {
                    props.insert("p1".to_string(), vals(3..6));
                }
                allowances.insert(super::tree::leaf_key([a, b, c]), props);
            }
        }
    }
    let entries = |prefix: &str, n: u32| -> Vec<NamedEntry> {
        (0..n)
            .map(|id| NamedEntry {
                id,
                name: format!("{prefix}{id}"),
            })
            .collect()
    };
    HierarchySpec {
        levels: [
            LevelSpec {
                name: "A".into(),
                size: 3,
            },
            LevelSpec {
                name: "B".into(),
                size: 6,
            },
            LevelSpec {
                name: "C".into(),
                size: 12,
            },
        ],
        nodes,
        properties: entries("p", 2),
        values: entries("v", 6),
        allowances,
    }
}
