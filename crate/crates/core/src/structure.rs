//! Branch and layer decomposition.

use serde::Serialize;
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum StructureError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("branch dependency map is cyclic: {0} branch(es) never reached in-degree zero")]
    Cycle(usize),
    #[error("invalid refine config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLabel {
    Sequential,
    Splitter,
    Merger,
    SplitMerge,
}

impl NodeLabel {
    /// Degrees count distinct neighbouring nodes; zero counts as one.
    pub fn from_degrees(d_in: usize, d_out: usize) -> Self {
        match (d_in.max(1) > 1, d_out.max(1) > 1) {
            (false, false) => NodeLabel::Sequential,
            (false, true) => NodeLabel::Splitter,
            (true, false) => NodeLabel::Merger,
            (true, true) => NodeLabel::SplitMerge,
        }
    }
}

pub fn classify_nodes(g: &Graph) -> Vec<NodeLabel> {
    let adj = g.adjacency();
    g.node_ids()
        .map(|n| {
            if g.node(n).control_flow {
                NodeLabel::SplitMerge
            } else {
                NodeLabel::from_degrees(adj.in_degree(n), adj.out_degree(n))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub id: usize,
    /// Execution order; consecutive nodes are joined by an edge.
    pub nodes: Vec<NodeId>,
    pub flops: f64,
    pub contains_delegate: bool,
}

impl Branch {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Groups maximal Sequential runs into branches; every other node, and
/// every delegate node, is a branch of its own. Runs start in topological
/// order so each one begins at its head.
pub fn extract_branches(
    g: &Graph,
    labels: &[NodeLabel],
    flops: &[f64],
) -> Result<Vec<Branch>, StructureError> {
    let adj = g.adjacency();
    let order = g.topo_order(&adj)?;
    let mut visited = vec![false; g.node_count()];
    let mut branches = Vec::new();
    let run_member = |n: NodeId| labels[n.0] == NodeLabel::Sequential && !g.node(n).is_delegate();
    for start in order {
        if visited[start.0] {
            continue;
        }
        let mut nodes = vec![start];
        visited[start.0] = true;
        if run_member(start) {
            let mut v = start;
            while let [next] = adj.succ[v.0][..] {
                if visited[next.0] || !run_member(next) {
                    break;
                }
                visited[next.0] = true;
                nodes.push(next);
                v = next;
            }
        }
        branches.push(Branch {
            id: branches.len(),
            flops: nodes.iter().map(|n| flops[n.0]).sum(),
            contains_delegate: nodes.iter().any(|&n| g.node(n).is_delegate()),
            nodes,
        });
    }
    Ok(branches)
}

/// `branch_of[node]` for every node.
pub fn branch_index(node_count: usize, branches: &[Branch]) -> Vec<usize> {
    let mut of = vec![usize::MAX; node_count];
    for b in branches {
        for &n in &b.nodes {
            of[n.0] = b.id;
        }
    }
    of
}

/// Successor branches per branch: b -> b' iff an edge runs from b into b'.
pub fn branch_dependencies(g: &Graph, branches: &[Branch]) -> Vec<Vec<usize>> {
    let adj = g.adjacency();
    let of = branch_index(g.node_count(), branches);
    let mut deps = vec![Vec::new(); branches.len()];
    for b in branches {
        for &n in &b.nodes {
            for &s in &adj.succ[n.0] {
                if of[s.0] != b.id {
                    deps[b.id].push(of[s.0]);
                }
            }
        }
        deps[b.id].sort_unstable();
        deps[b.id].dedup();
    }
    deps
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Layer {
    pub index: usize,
    /// Ascending branch ids.
    pub branches: Vec<usize>,
    pub parallel_eligible: bool,
}

/// Frontier-by-frontier Kahn layering of the branch dependency map.
pub fn build_layers(
    branch_count: usize,
    deps: &[Vec<usize>],
) -> Result<Vec<Layer>, StructureError> {
    let mut indeg = vec![0usize; branch_count];
    for succ in deps {
        for &s in succ {
            indeg[s] += 1;
        }
    }
    let mut frontier: Vec<usize> = (0..branch_count).filter(|&b| indeg[b] == 0).collect();
    let mut layers = Vec::new();
    let mut placed = 0;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &b in &frontier {
            for &s in &deps[b] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    next.push(s);
                }
            }
        }
        placed += frontier.len();
        frontier.sort_unstable();
        layers.push(Layer {
            index: layers.len(),
            branches: std::mem::replace(&mut frontier, next),
            parallel_eligible: false,
        });
    }
    if placed != branch_count {
        return Err(StructureError::Cycle(branch_count - placed));
    }
    Ok(layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefineConfig {
    /// Branches need strictly more nodes than this to run in parallel.
    pub min_branch_nodes: usize,
    pub beta: f64,
    pub max_threads: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            min_branch_nodes: 2,
            beta: 1.5,
            max_threads: 6,
        }
    }
}

impl RefineConfig {
    pub fn check(&self) -> Result<(), StructureError> {
        if !(self.beta >= 1.0) {
            return Err(StructureError::Config(format!(
                "beta must be >= 1, got {}",
                self.beta
            )));
        }
        if self.max_threads == 0 {
            return Err(StructureError::Config("max_threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether a layer's branches are balanced and large enough to run together.
/// Zero-FLOP branches do not take part in the balance ratio.
pub fn layer_eligible(members: &[&Branch], cfg: &RefineConfig) -> bool {
    if members.len() < 2 {
        return false;
    }
    if members
        .iter()
        .any(|b| !b.contains_delegate && b.node_count() <= cfg.min_branch_nodes)
    {
        return false;
    }
    let working = members.iter().map(|b| b.flops).filter(|&f| f > 0.0);
    let (lo, hi) = working.fold((f64::INFINITY, 0.0f64), |(lo, hi), f| {
        (lo.min(f), hi.max(f))
    });
    !lo.is_finite() || hi / lo <= cfg.beta
}

pub fn refine(layers: &mut [Layer], branches: &[Branch], cfg: &RefineConfig) {
    for layer in layers.iter_mut() {
        let members: Vec<&Branch> = layer.branches.iter().map(|&b| &branches[b]).collect();
        layer.parallel_eligible = layer_eligible(&members, cfg);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StructureCounts {
    pub nodes: usize,
    pub branches: usize,
    pub layers: usize,
    pub parallel_layers: usize,
    pub max_branches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanStructure {
    pub labels: Vec<NodeLabel>,
    pub branches: Vec<Branch>,
    pub deps: Vec<Vec<usize>>,
    pub layers: Vec<Layer>,
}

impl PlanStructure {
    /// Labels, branches, layers and refinement in one pass.
    pub fn build(g: &Graph, flops: &[f64], cfg: &RefineConfig) -> Result<Self, StructureError> {
        cfg.check()?;
        let labels = classify_nodes(g);
        let branches = extract_branches(g, &labels, flops)?;
        let deps = branch_dependencies(g, &branches);
        let mut layers = build_layers(branches.len(), &deps)?;
        refine(&mut layers, &branches, cfg);
        Ok(PlanStructure {
            labels,
            branches,
            deps,
            layers,
        })
    }

    pub fn counts(&self) -> StructureCounts {
        StructureCounts {
            nodes: self.labels.len(),
            branches: self.branches.len(),
            layers: self.layers.len(),
            parallel_layers: self.layers.iter().filter(|l| l.parallel_eligible).count(),
            max_branches: self
                .layers
                .iter()
                .map(|l| l.branches.len())
                .max()
                .unwrap_or(0),
        }
    }

    /// Layer index of each branch.
    pub fn layer_of(&self) -> Vec<usize> {
        let mut of = vec![0; self.branches.len()];
        for l in &self.layers {
            for &b in &l.branches {
                of[b] = l.index;
            }
        }
        of
    }
}
