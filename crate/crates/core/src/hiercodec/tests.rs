use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::presets::{self, RandomTreeParams};
use super::*;

fn entries(prefix: &str, n: u32, named: &[(u32, &str)]) -> Vec<NamedEntry> {
    (0..n)
        .map(|id| NamedEntry {
            id,
            name: named
                .iter()
                .find(|(i, _)| *i == id)
                .map(|(_, s)| s.to_string())
                .unwrap_or_else(|| format!("{prefix}{id}")),
        })
        .collect()
}

/// A retail-style tree in which "Women's Apparel" is A-token 14, "Upper
/// Garments" is B-token 25 beneath it and "Chiffon Blouse" is C-token 48.
fn apparel_spec() -> HierarchySpec {
    let mut nodes = Vec::new();
    for a in 0..15u32 {
        let name = if a == 14 {
            "Women's Apparel".to_string()
        } else {
            format!("a{a}")
        };
        nodes.push(NodeSpec {
            level: 0,
            id: a,
            name,
            parent: vec![],
        });
        let bs: Vec<u32> = if a == 14 { (0..26).collect() } else { vec![0] };
        for b in bs {
            let name = if a == 14 && b == 25 {
                "Upper Garments".to_string()
            } else {
                format!("b{b}")
            };
            nodes.push(NodeSpec {
                level: 1,
                id: b,
                name,
                parent: vec![a],
            });
            let cs: Vec<u32> = if a == 14 && b == 25 { (0..49).collect() } else { vec![0] };
            for c in cs {
                let name = if c == 48 {
                    "Chiffon Blouse".to_string()
                } else {
                    format!("c{c}")
                };
                nodes.push(NodeSpec {
                    level: 2,
                    id: c,
                    name,
                    parent: vec![a, b],
                });
            }
        }
    }
    let mut star = BTreeMap::new();
    star.insert("style".to_string(), vec!["cute".to_string(), "v0".to_string()]);
    star.insert("color".to_string(), vec!["v1".to_string(), "v2".to_string()]);
    HierarchySpec {
        levels: [
            LevelSpec {
                name: "department".into(),
                size: 15,
            },
            LevelSpec {
                name: "group".into(),
                size: 26,
            },
            LevelSpec {
                name: "product".into(),
                size: 49,
            },
        ],
        nodes,
        properties: entries("p", 2, &[(0, "color"), (1, "style")]),
        values: entries("v", 14, &[(13, "cute")]),
        allowances: BTreeMap::from([(ALL_LEAVES.to_string(), star)]),
    }
}

fn names(s: [&str; 3]) -> [String; 3] {
    s.map(str::to_string)
}

fn tiny_tree() -> HierarchyTree {
    // |A|=3, |B|=6, |C|=12 with unique names; P = {color, size}.
    let categories: Vec<(String, Vec<(String, Vec<String>)>)> = (0..3)
        .map(|a| {
            let bs = (0..2)
                .map(|b| {
                    let cs = (0..2).map(|c| format!("c{a}{b}{c}")).collect();
                    (format!("b{a}{b}"), cs)
                })
                .collect();
            (format!("a{a}"), bs)
        })
        .collect();
    let props = vec!["color".to_string(), "size".to_string()];
    let values: Vec<String> = ["red", "green", "blue", "small", "medium", "large"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut allow = BTreeMap::new();
    allow.insert(
        ALL_LEAVES.to_string(),
        BTreeMap::from([("color".to_string(), vec!["red".into(), "green".into(), "blue".into()])]),
    );
    allow.insert(
        "c000".to_string(),
        BTreeMap::from([("size".to_string(), vec!["small".into(), "large".into()])]),
    );
    HierarchySpec::from_unique_names(["l1", "l2", "l3"], &categories, &props, &values, &allow)
        .unwrap()
        .build()
        .unwrap()
}

/// Independent enumeration of every valid full sequence by walking the
/// spec's node list directly.
fn dfs_sequences(spec: &HierarchySpec) -> BTreeSet<Vec<u32>> {
    let sizes = [
        spec.levels[0].size,
        spec.levels[1].size,
        spec.levels[2].size,
        spec.properties.len() as u32,
        spec.values.len() as u32,
    ];
    let mut offs = [0u32; 5];
    let mut next = 2;
    for i in 0..5 {
        offs[i] = next;
        next += sizes[i];
    }
    let prop_id = |n: &str| spec.properties.iter().find(|e| e.name == n).unwrap().id;
    let val_id = |n: &str| spec.values.iter().find(|e| e.name == n).unwrap().id;
    let mut out = BTreeSet::new();
    for a in spec.nodes.iter().filter(|n| n.level == 0) {
        for b in spec.nodes.iter().filter(|n| n.level == 1 && n.parent == [a.id]) {
            for c in spec.nodes.iter().filter(|n| n.level == 2 && n.parent == [a.id, b.id]) {
                let mut pairs = BTreeSet::new();
                for key in [ALL_LEAVES.to_string(), leaf_key([a.id, b.id, c.id])] {
                    if let Some(props) = spec.allowances.get(&key) {
                        for (p, vs) in props {
                            for v in vs {
                                pairs.insert((prop_id(p), val_id(v)));
                            }
                        }
                    }
                }
                for (p, v) in pairs {
                    out.insert(vec![
                        BOS,
                        offs[0] + a.id,
                        offs[1] + b.id,
                        offs[2] + c.id,
                        offs[3] + p,
                        offs[4] + v,
                        EOS,
                    ]);
                }
            }
        }
    }
    out
}

/// Every sequence reachable by always following `valid_next_tokens`.
fn walk_sequences(tree: &HierarchyTree) -> BTreeSet<Vec<u32>> {
    let mut out = BTreeSet::new();
    let mut stack = vec![vec![BOS]];
    while let Some(prefix) = stack.pop() {
        for t in tree.valid_next_tokens(&prefix).unwrap() {
            let mut p = prefix.clone();
            p.push(t);
            if t == EOS {
                assert_eq!(p.len(), SEQ_LEN);
                out.insert(p);
            } else {
                stack.push(p);
            }
        }
    }
    out
}

#[test]
fn apparel_label_encodes_to_expected_tokens() {
    let tree = apparel_spec().build().unwrap();
    let named = NamedLabel {
        category: names(["Women's Apparel", "Upper Garments", "Chiffon Blouse"]),
        property: "style".into(),
        value: "cute".into(),
    };
    let label = tree.resolve(&named).unwrap();
    assert_eq!(
        label,
        Label {
            path: [14, 25, 48],
            property: 1,
            value: 13
        }
    );
    let seq = tree.encode_label(&label).unwrap();
    let v = tree.vocab();
    assert_eq!(
        seq.tokens(),
        &[
            BOS,
            v.token(Level::A, 14),
            v.token(Level::B, 25),
            v.token(Level::C, 48),
            v.token(Level::Property, 1),
            v.token(Level::Value, 13),
            EOS
        ]
    );
    assert_eq!(tree.decode_tokens(&seq).unwrap(), label);
    assert_eq!(tree.name(&label).unwrap(), named);
}

#[test]
fn geometry_presets_validate() {
    for (g, name) in [
        (presets::MSCOCO, "mscoco"),
        (presets::OBJECTS365, "objects365"),
        (presets::PRODUCTS7417, "products7417"),
    ] {
        assert_eq!(presets::by_name(name), Some(g));
        let tree = presets::geometry_spec(g).unwrap().build().unwrap();
        assert_eq!(tree.num_leaves() as u32, g.leaves, "{name}");
        let v = tree.vocab();
        assert_eq!(v.codebook_size(Level::A), g.category_sizes[0]);
        assert_eq!(v.codebook_size(Level::B), g.category_sizes[1]);
        assert_eq!(v.codebook_size(Level::C), g.category_sizes[2]);
        assert_eq!(v.codebook_size(Level::Property), g.attribute_sizes[0]);
        assert_eq!(v.codebook_size(Level::Value), g.attribute_sizes[1]);
        let leaf = tree.leaf_paths().next().unwrap();
        let pairs: usize = tree.allowances(leaf).unwrap().values().map(Vec::len).sum();
        assert_eq!(pairs as u32, g.attributes, "{name}");
    }
}

#[test]
fn json_round_trip_preserves_tree() {
    let spec = presets::geometry_spec(presets::MSCOCO).unwrap();
    let back = HierarchySpec::from_json(&spec.to_json()).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn orphan_c_node_is_rejected() {
    let mut spec = tiny_tree().spec().clone();
    let c = spec.nodes.iter_mut().find(|n| n.level == 2).unwrap();
    c.parent = vec![0, 5];
    assert!(matches!(spec.build(), Err(CodecError::Structure { .. })));
}

#[test]
fn structural_violations_are_rejected() {
    let base = tiny_tree().spec().clone();

    let mut dup = base.clone();
    let first_b = dup.nodes.iter().find(|n| n.level == 1).unwrap().clone();
    dup.nodes.push(first_b);
    assert!(dup.build().is_err(), "duplicate sibling");

    let mut gap = base.clone();
    gap.levels[2].size += 1;
    assert!(gap.build().is_err(), "unused codebook token");

    let mut childless = base.clone();
    childless.levels[0].size += 1;
    childless.nodes.push(NodeSpec {
        level: 0,
        id: 3,
        name: "a3".into(),
        parent: vec![],
    });
    assert!(childless.build().is_err(), "A node without children");

    let mut unknown_value = base.clone();
    unknown_value
        .allowances
        .get_mut(ALL_LEAVES)
        .unwrap()
        .insert("color".into(), vec!["plaid".into()]);
    assert!(unknown_value.build().is_err(), "value not in V");

    let mut empty = base;
    empty
        .allowances
        .get_mut(ALL_LEAVES)
        .unwrap()
        .insert("color".into(), vec![]);
    assert!(empty.build().is_err(), "empty value list");
}

#[test]
fn from_unique_names_assigns_lexicographic_ids() {
    let tree = tiny_tree();
    assert_eq!(tree.property_id("color").unwrap(), 0);
    assert_eq!(tree.property_id("size").unwrap(), 1);
    // blue < green < large < medium < red < small
    assert_eq!(tree.value_id("blue").unwrap(), 0);
    assert_eq!(tree.value_id("small").unwrap(), 5);
    assert_eq!(tree.resolve_path(&names(["a2", "b21", "c210"])).unwrap(), [2, 5, 10]);
    assert_eq!(tree.num_leaves(), 12);
}

#[test]
fn leaf_specific_allowances_extend_the_default() {
    let tree = tiny_tree();
    let c000 = tree.resolve_path(&names(["a0", "b00", "c000"])).unwrap();
    let c001 = tree.resolve_path(&names(["a0", "b00", "c001"])).unwrap();
    assert_eq!(tree.allowances(c000).unwrap().len(), 2);
    assert_eq!(tree.allowances(c001).unwrap().len(), 1);
    assert_eq!(tree.allowed_values(c000, 1), &[2, 5]);
    assert!(tree.allowed_values(c001, 1).is_empty());
    assert_eq!(tree.num_labels(), 12 * 3 + 2);
}

#[test]
fn disallowed_and_inconsistent_labels_fail() {
    let tree = tiny_tree();
    let size = tree.property_id("size").unwrap();
    let small = tree.value_id("small").unwrap();
    let red = tree.value_id("red").unwrap();
    let c001 = tree.resolve_path(&names(["a0", "b00", "c001"])).unwrap();
    let bad = Label {
        path: c001,
        property: size,
        value: small,
    };
    assert!(matches!(tree.encode_label(&bad), Err(CodecError::Disallowed { .. })));
    let wrong_value = Label {
        path: c001,
        property: 0,
        value: small,
    };
    assert!(matches!(
        tree.encode_label(&wrong_value),
        Err(CodecError::Disallowed { .. })
    ));

    // b10 belongs to a1, not a0.
    let b10 = tree.resolve_path(&names(["a1", "b10", "c100"])).unwrap()[1];
    let mismatch = Label {
        path: [0, b10, 0],
        property: 0,
        value: red,
    };
    assert!(matches!(
        tree.encode_label(&mismatch),
        Err(CodecError::ParentMismatch { .. })
    ));
    let named = NamedLabel {
        category: names(["a0", "b10", "c100"]),
        property: "color".into(),
        value: "red".into(),
    };
    assert!(tree.resolve(&named).is_err());
}

#[test]
fn malformed_sequences_fail_to_decode() {
    let tree = tiny_tree();
    let label = tree.enumerate_labels()[0];
    let toks = tree.encode_label(&label).unwrap().into_tokens();

    // Only four payload tokens.
    let mut short = toks.clone();
    short.remove(5);
    assert!(matches!(
        tree.decode_tokens(&TokenSeq::from_raw(short)),
        Err(CodecError::Malformed(_))
    ));

    let mut no_bos = toks.clone();
    no_bos[0] = EOS;
    assert!(matches!(
        tree.decode_tokens(&TokenSeq::from_raw(no_bos)),
        Err(CodecError::Malformed(_))
    ));

    // Category and property positions swapped.
    let mut swapped = toks.clone();
    swapped.swap(3, 4);
    assert!(matches!(
        tree.decode_tokens(&TokenSeq::from_raw(swapped)),
        Err(CodecError::Malformed(_))
    ));

    let mut oob = toks;
    oob[5] = tree.vocab_size() as u32;
    assert!(tree.decode_tokens(&TokenSeq::from_raw(oob)).is_err());
}

#[test]
fn valid_next_tokens_follow_the_tree() {
    let tree = tiny_tree();
    let v = *tree.vocab();
    let root = tree.valid_next_tokens(&[BOS]).unwrap();
    assert_eq!(root, v.range(Level::A).collect::<Vec<_>>());

    let a1 = v.token(Level::A, 1);
    let bs = tree.valid_next_tokens(&[BOS, a1]).unwrap();
    assert_eq!(bs, vec![v.token(Level::B, 2), v.token(Level::B, 3)]);

    let seq = tree.encode_label(&tree.enumerate_labels()[0]).unwrap().into_tokens();
    assert_eq!(tree.valid_next_tokens(&seq[..6]).unwrap(), vec![EOS]);
    assert!(matches!(
        tree.valid_next_tokens(&seq),
        Err(CodecError::InvalidPrefix(_))
    ));
    assert!(matches!(tree.valid_next_tokens(&[]), Err(CodecError::InvalidPrefix(_))));
    assert!(tree.valid_next_tokens(&[BOS, v.token(Level::B, 0)]).is_err());
    // B token under the wrong A.
    assert!(tree.valid_next_tokens(&[BOS, a1, v.token(Level::B, 0)]).is_err());
}

#[test]
fn vocabulary_ranges_are_disjoint_and_cover_everything() {
    let tree = presets::geometry_spec(presets::OBJECTS365).unwrap().build().unwrap();
    let v = tree.vocab();
    let mut next = NUM_SPECIALS;
    for l in Level::ALL {
        let r = v.range(l);
        assert_eq!(r.start, next);
        next = r.end;
        for t in r {
            assert_eq!(v.split(t).map(|(lv, _)| lv), Some(l));
        }
    }
    assert_eq!(next as usize, tree.vocab_size());
    assert_eq!(v.split(BOS), None);
    assert_eq!(v.split(EOS), None);
    assert_eq!(v.split(next), None);
}

#[test]
fn tiny_tree_walk_matches_dfs_oracle() {
    let tree = tiny_tree();
    let dfs = dfs_sequences(tree.spec());
    assert_eq!(dfs.len(), 38);
    assert_eq!(walk_sequences(&tree), dfs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_trees_walk_matches_dfs_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = presets::random_spec(&mut rng, RandomTreeParams::default());
        let tree = spec.build().unwrap();
        let dfs = dfs_sequences(&spec);
        prop_assert_eq!(dfs.len(), tree.num_labels());
        prop_assert_eq!(walk_sequences(&tree), dfs);
    }

    #[test]
    fn labels_round_trip_through_tokens_and_names(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = presets::random_spec(&mut rng, RandomTreeParams::default()).build().unwrap();
        for label in tree.enumerate_labels() {
            let seq = tree.encode_label(&label).unwrap();
            prop_assert_eq!(seq.len(), SEQ_LEN);
            prop_assert_eq!(tree.decode_tokens(&seq).unwrap(), label);
            let named = tree.name(&label).unwrap();
            prop_assert_eq!(tree.resolve(&named).unwrap(), label);
            // Each prefix admits the next token of the encoding.
            let t = seq.tokens();
            for i in 1..SEQ_LEN {
                prop_assert!(tree.valid_next_tokens(&t[..i]).unwrap().contains(&t[i]));
            }
        }
    }

    #[test]
    fn random_token_sequences_decode_iff_enumerated(
        seed in any::<u64>(),
        raw in proptest::collection::vec(any::<u32>(), 0..9),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = presets::random_spec(&mut rng, RandomTreeParams::default()).build().unwrap();
        let n = tree.vocab_size() as u32;
        let toks: Vec<u32> = raw.iter().map(|t| t % n).collect();
        let valid = dfs_sequences(tree.spec());
        let decoded = tree.decode_tokens(&TokenSeq::from_raw(toks.clone()));
        prop_assert_eq!(decoded.is_ok(), valid.contains(&toks));
    }
}
