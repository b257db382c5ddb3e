use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CodecError, Label, Level, NamedLabel, Result, Vocab};

/// Allowance key that applies to every leaf.
pub const ALL_LEAVES: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub name: String,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    /// 0, 1 or 2 for the A, B and C levels.
    pub level: u8,
    /// Codebook token within the level.
    pub id: u32,
    pub name: String,
    /// Token path of the parent: empty for A, `[a]` for B, `[a, b]` for C.
    #[serde(default)]
    pub parent: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedEntry {
    pub id: u32,
    pub name: String,
}

/// The on-disk hierarchy document.
///
/// `allowances` maps a leaf key (`"a/b/c"` token path, or `"*"` for every
/// leaf) to property name → allowed value names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub levels: [LevelSpec; 3],
    pub nodes: Vec<NodeSpec>,
    pub properties: Vec<NamedEntry>,
    pub values: Vec<NamedEntry>,
    pub allowances: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

pub fn leaf_key(path: [u32; 3]) -> String {
    format!("{}/{}/{}", path[0], path[1], path[2])
}

fn structure(node: impl Into<String>, reason: impl Into<String>) -> CodecError {
    CodecError::Structure {
        node: node.into(),
        reason: reason.into(),
    }
}

/// Assigns ids to names in lexicographic order.
fn lexicographic_ids<'a>(names: impl IntoIterator<Item = &'a str>) -> BTreeMap<&'a str, u32> {
    let set: BTreeSet<&str> = names.into_iter().collect();
    set.into_iter().zip(0..).collect()
}

impl HierarchySpec {
    /// Builds a document from nested names where every name is unique within
    /// its level, assigning each codebook's ids in lexicographic name order.
    ///
    /// `categories` is `[(a, [(b, [c, ...]), ...]), ...]`; `allowances` maps
    /// a leaf name (or `"*"`) to property → values.
    pub fn from_unique_names(
        level_names: [&str; 3],
        categories: &[(String, Vec<(String, Vec<String>)>)],
        properties: &[String],
        values: &[String],
        allowances: &BTreeMap<String, BTreeMap<String, Vec<String>>>,
    ) -> Result<Self> {
        let a_ids = lexicographic_ids(categories.iter().map(|(a, _)| a.as_str()));
        let b_ids = lexicographic_ids(categories.iter().flat_map(|(_, bs)| bs.iter().map(|(b, _)| b.as_str())));
        let c_ids = lexicographic_ids(
            categories
                .iter()
                .flat_map(|(_, bs)| bs.iter().flat_map(|(_, cs)| cs.iter().map(String::as_str))),
        );
        let mut nodes = Vec::new();
        let mut leaf_paths = HashMap::new();
        for (a, bs) in categories {
            let ai = a_ids[a.as_str()];
            nodes.push(NodeSpec {
                level: 0,
                id: ai,
                name: a.clone(),
                parent: vec![],
            });
            for (b, cs) in bs {
                let bi = b_ids[b.as_str()];
                nodes.push(NodeSpec {
                    level: 1,
                    id: bi,
                    name: b.clone(),
                    parent: vec![ai],
                });
                for c in cs {
                    let ci = c_ids[c.as_str()];
                    nodes.push(NodeSpec {
                        level: 2,
                        id: ci,
                        name: c.clone(),
                        parent: vec![ai, bi],
                    });
                    leaf_paths.insert(c.as_str(), [ai, bi, ci]);
                }
            }
        }
        nodes.sort_by_key(|n| (n.level, n.parent.clone(), n.id));
        let entries = |names: &[String]| -> Vec<NamedEntry> {
            lexicographic_ids(names.iter().map(String::as_str))
                .into_iter()
                .map(|(name, id)| NamedEntry {
                    id,
                    name: name.to_string(),
                })
                .collect()
        };
        let mut allow = BTreeMap::new();
        for (leaf, props) in allowances {
            let key = if leaf == ALL_LEAVES {
                ALL_LEAVES.to_string()
            } else {
                let path = leaf_paths.get(leaf.as_str()).ok_or_else(|| CodecError::UnknownName {
                    kind: "leaf",
                    name: leaf.clone(),
                })?;
                leaf_key(*path)
            };
            allow.insert(key, props.clone());
        }
        Ok(Self {
            levels: [
                LevelSpec {
                    name: level_names[0].into(),
                    size: a_ids.len() as u32,
                },
                LevelSpec {
                    name: level_names[1].into(),
                    size: b_ids.len() as u32,
                },
                LevelSpec {
                    name: level_names[2].into(),
                    size: c_ids.len() as u32,
                },
            ],
            nodes,
            properties: entries(properties),
            values: entries(values),
            allowances: allow,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CodecError::Document(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hierarchy spec serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CodecError::Document(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn build(&self) -> Result<HierarchyTree> {
        HierarchyTree::build(self)
    }
}

#[derive(Debug, Clone)]
struct BNode {
    name: String,
    children: Vec<u32>,
}

#[derive(Debug, Clone)]
struct Leaf {
    path: [u32; 3],
    name: String,
    allow: BTreeMap<u32, Vec<u32>>,
}

/// A validated, immutable category–attribute tree.
#[derive(Debug, Clone)]
pub struct HierarchyTree {
    spec: HierarchySpec,
    vocab: Vocab,
    a_names: Vec<String>,
    b_children: Vec<Vec<u32>>,
    b_nodes: BTreeMap<(u32, u32), BNode>,
    leaves: Vec<Leaf>,
    leaf_index: HashMap<[u32; 3], usize>,
    properties: Vec<String>,
    values: Vec<String>,
    property_ids: HashMap<String, u32>,
    value_ids: HashMap<String, u32>,
}

fn named_codebook(kind: &'static str, entries: &[NamedEntry]) -> Result<(Vec<String>, HashMap<String, u32>)> {
    let n = entries.len();
    let mut names = vec![None; n];
    let mut ids = HashMap::new();
    for e in entries {
        let slot = names
            .get_mut(e.id as usize)
            .ok_or_else(|| structure(format!("{kind} `{}`", e.name), format!("id {} outside [0, {n})", e.id)))?;
        if slot.is_some() {
            return Err(structure(
                format!("{kind} `{}`", e.name),
                format!("duplicate id {}", e.id),
            ));
        }
        if ids.insert(e.name.clone(), e.id).is_some() {
            return Err(structure(format!("{kind} `{}`", e.name), "duplicate name"));
        }
        *slot = Some(e.name.clone());
    }
    if n == 0 {
        return Err(structure(kind, "empty codebook"));
    }
    Ok((names.into_iter().map(Option::unwrap).collect(), ids))
}

impl HierarchyTree {
    pub fn build(spec: &HierarchySpec) -> Result<Self> {
        let sizes = [spec.levels[0].size, spec.levels[1].size, spec.levels[2].size];
        for (i, s) in sizes.iter().enumerate() {
            if *s == 0 {
                return Err(structure(format!("level {}", spec.levels[i].name), "empty codebook"));
            }
        }
        let (properties, property_ids) = named_codebook("property", &spec.properties)?;
        let (values, value_ids) = named_codebook("value", &spec.values)?;

        let mut a_names: Vec<Option<String>> = vec![None; sizes[0] as usize];
        let mut b_nodes: BTreeMap<(u32, u32), BNode> = BTreeMap::new();
        let mut leaves_by_path: BTreeMap<[u32; 3], String> = BTreeMap::new();
        let mut used = [BTreeSet::new(), BTreeSet::new(), BTreeSet::new()];
        let mut sibling_names: HashMap<(u8, Vec<u32>, String), ()> = HashMap::new();

        let mut sorted: Vec<&NodeSpec> = spec.nodes.iter().collect();
        sorted.sort_by_key(|n| n.level);
        for node in sorted {
            let label = format!("node `{}` (level {}, id {})", node.name, node.level, node.id);
            let lvl = node.level as usize;
            if lvl > 2 {
                return Err(structure(label, "level must be 0, 1 or 2"));
            }
            if node.id >= sizes[lvl] {
                return Err(structure(label, format!("id outside codebook of size {}", sizes[lvl])));
            }
            if node.parent.len() != lvl {
                return Err(structure(label, format!("parent path must have {lvl} tokens")));
            }
            if sibling_names
                .insert((node.level, node.parent.clone(), node.name.clone()), ())
                .is_some()
            {
                return Err(structure(label, "duplicate name among siblings"));
            }
            used[lvl].insert(node.id);
            match lvl {
                0 => {
                    let slot = &mut a_names[node.id as usize];
                    if slot.is_some() {
                        return Err(structure(label, "duplicate id"));
                    }
                    *slot = Some(node.name.clone());
                }
                1 => {
                    let a = node.parent[0];
                    if a_names.get(a as usize).and_then(Option::as_ref).is_none() {
                        return Err(structure(label, format!("orphan: no A node {a}")));
                    }
                    let key = (a, node.id);
                    if b_nodes.contains_key(&key) {
                        return Err(structure(label, "duplicate id among siblings"));
                    }
                    b_nodes.insert(
                        key,
                        BNode {
                            name: node.name.clone(),
                            children: Vec::new(),
                        },
                    );
                }
                _ => {
                    let key = (node.parent[0], node.parent[1]);
                    let Some(parent) = b_nodes.get_mut(&key) else {
                        return Err(structure(label, format!("orphan: no B node {:?}", node.parent)));
                    };
                    if parent.children.contains(&node.id) {
                        return Err(structure(label, "duplicate id among siblings"));
                    }
                    parent.children.push(node.id);
                    leaves_by_path.insert([key.0, key.1, node.id], node.name.clone());
                }
            }
        }
        for (lvl, set) in used.iter().enumerate() {
            if set.len() as u32 != sizes[lvl] {
                let missing = (0..sizes[lvl]).find(|i| !set.contains(i)).unwrap_or(0);
                return Err(structure(
                    format!("level {} token {missing}", spec.levels[lvl].name),
                    "codebook token used by no node (ids must be dense)",
                ));
            }
        }
        let a_names: Vec<String> = a_names.into_iter().map(|n| n.expect("dense A level")).collect();
        let mut b_children = vec![Vec::new(); a_names.len()];
        for (&(a, b), node) in b_nodes.iter_mut() {
            b_children[a as usize].push(b);
            node.children.sort_unstable();
            if node.children.is_empty() {
                return Err(structure(
                    format!("B node `{}` {:?}", node.name, [a, b]),
                    "has no C children",
                ));
            }
        }
        for (a, kids) in b_children.iter().enumerate() {
            if kids.is_empty() {
                return Err(structure(format!("A node `{}`", a_names[a]), "has no B children"));
            }
        }

        let resolve_allow = |key: &str, props: &BTreeMap<String, Vec<String>>| -> Result<BTreeMap<u32, Vec<u32>>> {
            let mut out = BTreeMap::new();
            for (p, vs) in props {
                let pid = *property_ids
                    .get(p)
                    .ok_or_else(|| structure(format!("allowance `{key}`"), format!("unknown property `{p}`")))?;
                if vs.is_empty() {
                    return Err(structure(
                        format!("allowance `{key}`"),
                        format!("property `{p}` lists no values"),
                    ));
                }
                let mut ids = Vec::with_capacity(vs.len());
                for v in vs {
                    let vid = *value_ids
                        .get(v)
                        .ok_or_else(|| structure(format!("allowance `{key}`"), format!("unknown value `{v}`")))?;
                    ids.push(vid);
                }
                ids.sort_unstable();
                ids.dedup();
                out.insert(pid, ids);
            }
            Ok(out)
        };
        let default_allow = match spec.allowances.get(super::tree::ALL_LEAVES) {
            Some(p) => resolve_allow(ALL_LEAVES, p)?,
            None => BTreeMap::new(),
        };
        let mut leaves: Vec<Leaf> = leaves_by_path
            .into_iter()
            .map(|(path, name)| Leaf {
                path,
                name,
                allow: default_allow.clone(),
            })
            .collect();
        let leaf_index: HashMap<[u32; 3], usize> = leaves.iter().enumerate().map(|(i, l)| (l.path, i)).collect();
        for (key, props) in &spec.allowances {
            if key == ALL_LEAVES {
                continue;
            }
            let path = parse_leaf_key(key)
                .and_then(|p| leaf_index.get(&p).copied())
                .ok_or_else(|| structure(format!("allowance `{key}`"), "dangling: no such leaf"))?;
            let specific = resolve_allow(key, props)?;
            leaves[path].allow.extend(specific);
        }
        for leaf in &leaves {
            if leaf.allow.is_empty() {
                return Err(structure(
                    format!("leaf `{}` {:?}", leaf.name, leaf.path),
                    "has no allowed properties",
                ));
            }
        }
        let vocab = Vocab::new([
            sizes[0],
            sizes[1],
            sizes[2],
            properties.len() as u32,
            values.len() as u32,
        ]);
        Ok(Self {
            spec: spec.clone(),
            vocab,
            a_names,
            b_children,
            b_nodes,
            leaves,
            leaf_index,
            properties,
            values,
            property_ids,
            value_ids,
        })
    }

    pub fn spec(&self) -> &HierarchySpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn level_name(&self, level: usize) -> &str {
        &self.spec.levels[level].name
    }

    /// Leaf token paths in ascending order.
    pub fn leaf_paths(&self) -> impl Iterator<Item = [u32; 3]> + '_ {
        self.leaves.iter().map(|l| l.path)
    }

    pub fn leaf_index(&self, path: [u32; 3]) -> Option<usize> {
        self.leaf_index.get(&path).copied()
    }

    pub fn property_names(&self) -> &[String] {
        &self.properties
    }

    pub fn value_names(&self) -> &[String] {
        &self.values
    }

    pub fn property_id(&self, name: &str) -> Result<u32> {
        self.property_ids
            .get(name)
            .copied()
            .ok_or_else(|| CodecError::UnknownName {
                kind: "property",
                name: name.to_string(),
            })
    }

    pub fn value_id(&self, name: &str) -> Result<u32> {
        self.value_ids
            .get(name)
            .copied()
            .ok_or_else(|| CodecError::UnknownName {
                kind: "value",
                name: name.to_string(),
            })
    }

    pub fn a_tokens(&self) -> std::ops::Range<u32> {
        0..self.a_names.len() as u32
    }

    pub fn b_children(&self, a: u32) -> Option<&[u32]> {
        self.b_children.get(a as usize).map(Vec::as_slice)
    }

    pub fn c_children(&self, a: u32, b: u32) -> Option<&[u32]> {
        self.b_nodes.get(&(a, b)).map(|n| n.children.as_slice())
    }

    /// Property → allowed values at a leaf.
    pub fn allowances(&self, leaf: [u32; 3]) -> Option<&BTreeMap<u32, Vec<u32>>> {
        self.leaf_index(leaf).map(|i| &self.leaves[i].allow)
    }

    /// Allowed values for `(leaf, property)`; empty if the leaf lacks it.
    pub fn allowed_values(&self, leaf: [u32; 3], property: u32) -> &[u32] {
        self.allowances(leaf)
            .and_then(|a| a.get(&property))
            .map_or(&[], Vec::as_slice)
    }

    /// Checks that a category path exists.
    pub fn check_path(&self, path: [u32; 3]) -> Result<()> {
        if path[0] as usize >= self.a_names.len() {
            return Err(CodecError::UnknownId { kind: "A", id: path[0] });
        }
        if self.leaf_index.contains_key(&path) {
            Ok(())
        } else {
            Err(CodecError::ParentMismatch { path: path.to_vec() })
        }
    }

    pub fn check_label(&self, label: &Label) -> Result<()> {
        self.check_path(label.path)?;
        if label.property as usize >= self.properties.len() {
            return Err(CodecError::UnknownId {
                kind: "property",
                id: label.property,
            });
        }
        if label.value as usize >= self.values.len() {
            return Err(CodecError::UnknownId {
                kind: "value",
                id: label.value,
            });
        }
        if !self.allowed_values(label.path, label.property).contains(&label.value) {
            return Err(CodecError::Disallowed {
                leaf: label.path,
                property: label.property,
                value: label.value,
            });
        }
        Ok(())
    }

    /// Resolves a category name path to tokens.
    pub fn resolve_path(&self, names: &[String; 3]) -> Result<[u32; 3]> {
        let unknown = |kind, name: &str| CodecError::UnknownName {
            kind,
            name: name.to_string(),
        };
        let a = self
            .a_names
            .iter()
            .position(|n| n == &names[0])
            .ok_or_else(|| unknown("A category", &names[0]))? as u32;
        let b = self.b_children[a as usize]
            .iter()
            .copied()
            .find(|&b| self.b_nodes[&(a, b)].name == names[1])
            .ok_or_else(|| {
                if self.b_nodes.values().any(|n| n.name == names[1]) {
                    CodecError::ParentMismatch { path: vec![a] }
                } else {
                    unknown("B category", &names[1])
                }
            })?;
        let c = self.b_nodes[&(a, b)]
            .children
            .iter()
            .copied()
            .find(|&c| self.leaves[self.leaf_index[&[a, b, c]]].name == names[2])
            .ok_or_else(|| {
                if self.leaves.iter().any(|l| l.name == names[2]) {
                    CodecError::ParentMismatch { path: vec![a, b] }
                } else {
                    unknown("C category", &names[2])
                }
            })?;
        Ok([a, b, c])
    }

    pub fn path_names(&self, path: [u32; 3]) -> Result<[String; 3]> {
        self.check_path(path)?;
        Ok([
            self.a_names[path[0] as usize].clone(),
            self.b_nodes[&(path[0], path[1])].name.clone(),
            self.leaves[self.leaf_index[&path]].name.clone(),
        ])
    }

    pub fn resolve(&self, named: &NamedLabel) -> Result<Label> {
        let path = self.resolve_path(&named.category)?;
        let label = Label {
            path,
            property: self.property_id(&named.property)?,
            value: self.value_id(&named.value)?,
        };
        self.check_label(&label)?;
        Ok(label)
    }

    pub fn name(&self, label: &Label) -> Result<NamedLabel> {
        self.check_label(label)?;
        Ok(NamedLabel {
            category: self.path_names(label.path)?,
            property: self.properties[label.property as usize].clone(),
            value: self.values[label.value as usize].clone(),
        })
    }

    /// Every encodable label, in ascending (path, property, value) order.
    pub fn enumerate_labels(&self) -> Vec<Label> {
        let mut out = Vec::new();
        for leaf in &self.leaves {
            for (&p, vs) in &leaf.allow {
                for &v in vs {
                    out.push(Label {
                        path: leaf.path,
                        property: p,
                        value: v,
                    });
                }
            }
        }
        out
    }

    pub fn num_labels(&self) -> usize {
        self.leaves
            .iter()
            .map(|l| l.allow.values().map(Vec::len).sum::<usize>())
            .sum()
    }
}

fn parse_leaf_key(key: &str) -> Option<[u32; 3]> {
    let parts: Vec<u32> = key.split('/').map(|s| s.parse().ok()).collect::<Option<_>>()?;
    (parts.len() == 3).then(|| [parts[0], parts[1], parts[2]])
}

impl Level {
    pub fn of_depth(depth: usize) -> Option<Level> {
        Level::ALL.get(depth).copied()
    }
}
