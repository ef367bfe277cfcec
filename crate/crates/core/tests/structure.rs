mod common;

use common::*;
use parallax_core::graph::{DType, DimDoc, Graph, NodeId};
use parallax_core::pipeline::{prepare, structure_of};
use parallax_core::structure::{
    build_layers, classify_nodes, layer_eligible, Branch, NodeLabel, PlanStructure, RefineConfig,
};
use parallax_core::synth::Builder;
use proptest::prelude::*;
use serde_json::json;

fn branch(id: usize, n: usize, flops: f64) -> Branch {
    Branch {
        id,
        nodes: (0..n).map(NodeId).collect(),
        flops,
        contains_delegate: false,
    }
}

fn nodes_of(g: &Graph, b: &Branch) -> Vec<String> {
    b.nodes.iter().map(|n| g.node(*n).name.clone()).collect()
}

#[test]
fn chain_is_one_sequential_branch() {
    let g = fixture("chain");
    let s = structure_of(&g, &default_config()).unwrap();
    assert!(s.labels.iter().all(|&l| l == NodeLabel::Sequential));
    assert_eq!(s.branches.len(), 1);
    assert_eq!(s.branches[0].node_count(), 4);
    assert_eq!(s.layers.len(), 1);
    assert!(!s.layers[0].parallel_eligible);
}

#[test]
fn diamond_structure() {
    let g = fixture("diamond");
    let s = structure_of(&g, &default_config()).unwrap();
    let label = |n: &str| s.labels[g.node_id(n).unwrap().0];
    assert_eq!(
        [label("A"), label("B"), label("C"), label("D")],
        [
            NodeLabel::Splitter,
            NodeLabel::Sequential,
            NodeLabel::Sequential,
            NodeLabel::Merger
        ]
    );
    let layers: Vec<Vec<Vec<String>>> = s
        .layers
        .iter()
        .map(|l| {
            l.branches
                .iter()
                .map(|&b| nodes_of(&g, &s.branches[b]))
                .collect()
        })
        .collect();
    assert_eq!(
        layers,
        vec![vec![vec!["A"]], vec![vec!["B"], vec!["C"]], vec![vec!["D"]]]
    );
}

#[test]
fn control_flow_is_split_merge() {
    let mut b = Builder::new();
    let x = b.input("x", DType::F32, vec![DimDoc::Fixed(4)]);
    let t = b.op("pre", "Relu", &[&x], false, json!({}));
    let w = b.op_declared(
        "loop",
        "While",
        &[&t],
        false,
        json!({}),
        &[vec![DimDoc::Fixed(4)]],
    );
    let y = b.op("post", "Relu", &[&w[0]], false, json!({}));
    b.output(&y);
    let g = prepare(&Graph::from_doc(&b.finish()).unwrap()).unwrap();
    let labels = classify_nodes(&g);
    assert_eq!(labels[g.node_id("loop").unwrap().0], NodeLabel::SplitMerge);
    let s = structure_of(&g, &default_config()).unwrap();
    assert_eq!(s.branches.len(), 3);
}

#[test]
fn layering_examples() {
    let one = build_layers(1, &[vec![]]).unwrap();
    assert_eq!(one.len(), 1);
    let two = build_layers(2, &[vec![], vec![]]).unwrap();
    assert_eq!(two.len(), 1);
    assert_eq!(two[0].branches, vec![0, 1]);
    assert!(build_layers(2, &[vec![1], vec![0]]).is_err());
}

#[test]
fn two_independent_chains_share_a_layer() {
    let mut b = Builder::new();
    for side in ["l", "r"] {
        let mut cur = b.input(&format!("x{side}"), DType::F32, vec![DimDoc::Fixed(64)]);
        for i in 0..3 {
            cur = b.op(&format!("{side}{i}"), "Relu", &[&cur], false, json!({}));
        }
        b.output(&cur);
    }
    let g = prepare(&Graph::from_doc(&b.finish()).unwrap()).unwrap();
    let s = structure_of(&g, &default_config()).unwrap();
    assert_eq!(s.layers.len(), 1);
    assert_eq!(s.layers[0].branches.len(), 2);
    assert!(s.layers[0].parallel_eligible);
}

#[test]
fn refinement_examples() {
    let cfg = RefineConfig::default();
    let (a, b) = (branch(0, 3, 100.0), branch(1, 4, 120.0));
    assert!(layer_eligible(&[&a, &b], &cfg));
    let c = branch(1, 4, 200.0);
    assert!(!layer_eligible(&[&a, &c], &cfg));
    assert!(!layer_eligible(&[&a], &cfg));
    // N must exceed the minimum unless the branch is a delegate.
    let small = branch(1, 2, 100.0);
    assert!(!layer_eligible(&[&a, &small], &cfg));
    let delegate = Branch {
        contains_delegate: true,
        ..branch(1, 1, 110.0)
    };
    assert!(layer_eligible(&[&a, &delegate], &cfg));
    // Zero-FLOP branches stay out of the ratio.
    let free = branch(1, 5, 0.0);
    assert!(layer_eligible(&[&a, &free], &cfg));
    assert!(layer_eligible(&[&branch(0, 3, 0.0), &free], &cfg));
}

#[test]
fn invalid_refine_config() {
    let g = fixture("chain");
    let mut cfg = default_config();
    cfg.refine.beta = 0.5;
    assert!(structure_of(&g, &cfg).is_err());
    cfg.refine = RefineConfig {
        max_threads: 0,
        ..RefineConfig::default()
    };
    assert!(structure_of(&g, &cfg).is_err());
}

fn check_cover(g: &Graph, s: &PlanStructure) {
    let mut count = vec![0; g.node_count()];
    for b in &s.branches {
        for n in &b.nodes {
            count[n.0] += 1;
        }
    }
    assert!(count.iter().all(|&c| c == 1));
}

#[test]
fn whisper_cover_has_no_duplicates() {
    let g = fixture("whisper_like");
    assert_eq!(g.node_count(), 627);
    check_cover(&g, &structure_of(&g, &default_config()).unwrap());
}

/// Consecutive nodes of a branch are joined by an edge; interior nodes are Sequential.
fn check_paths(g: &Graph, s: &PlanStructure) {
    let adj = g.adjacency();
    for b in &s.branches {
        for w in b.nodes.windows(2) {
            assert!(adj.succ[w[0].0].contains(&w[1]));
        }
        if b.nodes.len() > 2 {
            for n in &b.nodes[1..b.nodes.len() - 1] {
                assert_eq!(s.labels[n.0], NodeLabel::Sequential);
            }
        }
    }
}

#[test]
fn fixture_branches_are_paths() {
    let cfg = default_config();
    for name in fixture_names() {
        let g = fixture(name);
        let s = structure_of(&g, &cfg).unwrap();
        check_cover(&g, &s);
        check_paths(&g, &s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn random_structures_are_consistent(seed in any::<u64>(), n in 1usize..200) {
        let g = random_graph(seed, n);
        let s = structure_of(&g, &default_config()).unwrap();
        check_cover(&g, &s);
        check_paths(&g, &s);
        let reach = reachability(&g);
        let layer_of = s.layer_of();
        for (b, succ) in s.deps.iter().enumerate() {
            for &c in succ {
                prop_assert!(layer_of[b] < layer_of[c]);
            }
        }
        for l in &s.layers {
            for &a in &l.branches {
                for &b in &l.branches {
                    if a == b {
                        continue;
                    }
                    for x in &s.branches[a].nodes {
                        for y in &s.branches[b].nodes {
                            prop_assert!(!reach[x.0][y.0]);
                        }
                    }
                }
            }
        }
        // Layer k holds exactly the branches whose deepest predecessor sits in layer k-1.
        let mut preds = vec![Vec::new(); s.branches.len()];
        for (b, succ) in s.deps.iter().enumerate() {
            for &c in succ {
                preds[c].push(b);
            }
        }
        for (b, p) in preds.iter().enumerate() {
            let want = p.iter().map(|&q| layer_of[q] + 1).max().unwrap_or(0);
            prop_assert_eq!(layer_of[b], want);
        }
    }
}
