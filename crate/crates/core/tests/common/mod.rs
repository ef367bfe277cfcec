//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use parallax_core::graph::{Graph, GraphDoc, NodeId};
use parallax_core::memplan::Liveness;
use parallax_core::pipeline::{prepare, PipelineConfig};
use parallax_core::synth::{self, RandomDagConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Transitive closure by DFS from every node: `reach[a][b]` iff a path a -> b exists.
pub fn reachability(g: &Graph) -> Vec<Vec<bool>> {
    let n = g.node_count();
    let mut succ = vec![Vec::new(); n];
    for (i, node) in g.nodes().iter().enumerate() {
        for &t in &node.outputs {
            for c in &g.tensor(t).consumers {
                succ[i].push(c.0);
            }
        }
    }
    (0..n)
        .map(|s| {
            let mut seen = vec![false; n];
            let mut stack = succ[s].clone();
            while let Some(v) = stack.pop() {
                if !seen[v] {
                    seen[v] = true;
                    stack.extend(succ[v].iter().copied());
                }
            }
            seen
        })
        .collect()
}

/// Max over steps of the summed sizes of tensors live at that step.
pub fn brute_force_peak(l: &Liveness) -> u64 {
    (0..l.steps.max(1))
        .map(|s| {
            l.intervals
                .iter()
                .filter(|iv| iv.def_step <= s && s <= iv.last_use_step)
                .map(|iv| iv.size_bytes)
                .sum::<u64>()
        })
        .max()
        .unwrap_or(0)
}

/// Largest feasible subset size by enumerating every subset.
pub fn max_feasible_subset(peaks: &[u64], budget: u64, max_threads: usize) -> usize {
    let n = peaks.len();
    let mut best = 0;
    for mask in 0u32..(1u32 << n) {
        let size = mask.count_ones() as usize;
        if size <= best || size > max_threads {
            continue;
        }
        let total: u64 = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| peaks[i])
            .sum();
        if total <= budget {
            best = size;
        }
    }
    best
}

/// Random DAG with per-seed variation in shape parameters.
pub fn random_doc(seed: u64, max_nodes: usize) -> GraphDoc {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cfg = RandomDagConfig::new(rng.gen_range(2..=max_nodes));
    cfg.chain_prob = rng.gen_range(0.2..0.9);
    cfg.window = rng.gen_range(2..24);
    cfg.max_fan_in = rng.gen_range(1..=4);
    cfg.accelerator_prob = rng.gen_range(0.0..1.0);
    synth::random_dag(&cfg, seed)
}

pub fn random_graph(seed: u64, max_nodes: usize) -> Graph {
    let g = Graph::from_doc(&random_doc(seed, max_nodes)).expect("random DAGs are well formed");
    prepare(&g).expect("random DAGs validate")
}

pub fn fixture(name: &str) -> Graph {
    prepare(&synth::fixture(name).expect("known fixture")).expect("fixture validates")
}

pub fn fixture_names() -> Vec<&'static str> {
    synth::fixtures().into_iter().map(|(n, _)| n).collect()
}

pub fn default_config() -> PipelineConfig {
    PipelineConfig::default()
}

pub fn ids(v: &[usize]) -> Vec<NodeId> {
    v.iter().map(|&i| NodeId(i)).collect()
}
