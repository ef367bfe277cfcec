//! Delegate candidate enumeration, cost-based pruning and region collapse.
//!
//! Candidates are the connected components of accelerator-capable,
//! non-control-flow nodes. A component that some outside path leaves and
//! re-enters is split: members reachable from its own outside successors
//! are peeled off and re-examined until every piece is convex. The check
//! runs against the graph with all previously finalised pieces contracted,
//! so collapsing any subset of the candidates keeps the graph acyclic.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::cost::{
    evaluate, region_stats, CostError, DelegationThresholds, FlopConfig, RegionStats, RejectReason,
};
use crate::graph::{
    Adjacency, Device, Graph, GraphDoc, GraphError, NodeDoc, NodeId, Producer, TensorId,
    DELEGATE_OP,
};

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// A candidate region with its cost-model verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelegateRegion {
    pub nodes: Vec<NodeId>,
    pub stats: RegionStats,
    pub accepted: bool,
    pub reason: Option<RejectReason>,
}

/// Maps a delegate node in the rewritten graph back to the original nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelegateInfo {
    pub node: NodeId,
    pub name: String,
    pub members: Vec<NodeId>,
    pub stats: RegionStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedGraph {
    pub graph: Graph,
    pub delegates: Vec<DelegateInfo>,
    pub audit: Vec<DelegateRegion>,
}

impl PartitionedGraph {
    /// The graph unchanged, with no delegates.
    pub fn identity(g: &Graph) -> Self {
        PartitionedGraph {
            graph: g.clone(),
            delegates: Vec::new(),
            audit: Vec::new(),
        }
    }

    pub fn cpu_node_count(&self) -> usize {
        self.graph.node_count() - self.delegates.len()
    }

    /// Per-region audit log, with node names from the original graph.
    pub fn audit_json(&self, original: &Graph) -> serde_json::Value {
        let records: Vec<_> = self
            .audit
            .iter()
            .map(|r| {
                json!({
                    "nodes": r.nodes.iter().map(|&n| original.node(n).name.clone()).collect::<Vec<_>>(),
                    "N": r.stats.node_count,
                    "F": r.stats.flops,
                    "B": r.stats.boundary_bytes,
                    "bytes_per_mac": serde_json::to_value(r.stats).expect("stats serialize")["bytes_per_mac"],
                    "decision": if r.accepted { "accepted" } else { "rejected" },
                    "reason": r.reason,
                })
            })
            .collect();
        serde_json::Value::Array(records)
    }
}

fn eligible(g: &Graph, n: NodeId) -> bool {
    let node = g.node(n);
    node.devices.accelerator && !node.control_flow && !node.is_delegate()
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Undirected connected components of `set`, each sorted, ordered by first member.
fn components(adj: &Adjacency, set: &BTreeSet<NodeId>) -> Vec<Vec<NodeId>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &start in set {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &m in adj.succ[n.0].iter().chain(&adj.pred[n.0]) {
                if set.contains(&m) && seen.insert(m) {
                    comp.push(m);
                    queue.push_back(m);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Scratch state for the re-entry search, reused across components so each
/// search only pays for the nodes it touches.
struct TaintSearch {
    /// Topological position of every node.
    pos: Vec<usize>,
    stamp: Vec<u32>,
    region_stamp: Vec<u32>,
    epoch: u32,
}

impl TaintSearch {
    fn new(pos: Vec<usize>) -> Self {
        let n = pos.len();
        TaintSearch {
            pos,
            stamp: vec![0; n],
            region_stamp: Vec::new(),
            epoch: 0,
        }
    }

    /// Members of `c` reachable from outside successors of `c`, with finalised
    /// regions treated as single contracted nodes. Nodes placed after the last
    /// member of `c` cannot reach it and are never visited.
    fn tainted(
        &mut self,
        adj: &Adjacency,
        c: &BTreeSet<NodeId>,
        region_of: &[Option<usize>],
        regions: &[Vec<NodeId>],
    ) -> BTreeSet<NodeId> {
        self.epoch += 1;
        self.region_stamp.resize(regions.len(), 0);
        let limit = c.iter().map(|n| self.pos[n.0]).max().unwrap_or(0);
        let mut queue = VecDeque::new();
        for &n in c {
            for &m in &adj.succ[n.0] {
                if !c.contains(&m) {
                    self.visit(m, limit, region_of, regions, &mut queue);
                }
            }
        }
        let mut hit = BTreeSet::new();
        while let Some(n) = queue.pop_front() {
            if c.contains(&n) {
                hit.insert(n);
            }
            for &m in &adj.succ[n.0] {
                self.visit(m, limit, region_of, regions, &mut queue);
            }
        }
        hit
    }

    fn visit(
        &mut self,
        n: NodeId,
        limit: usize,
        region_of: &[Option<usize>],
        regions: &[Vec<NodeId>],
        queue: &mut VecDeque<NodeId>,
    ) {
        match region_of[n.0] {
            Some(r) if self.region_stamp[r] != self.epoch => {
                self.region_stamp[r] = self.epoch;
                for &m in &regions[r] {
                    self.mark(m, limit, queue);
                }
            }
            Some(_) => {}
            None => self.mark(n, limit, queue),
        }
    }

    fn mark(&mut self, n: NodeId, limit: usize, queue: &mut VecDeque<NodeId>) {
        if self.pos[n.0] <= limit && self.stamp[n.0] != self.epoch {
            self.stamp[n.0] = self.epoch;
            queue.push_back(n);
        }
    }
}

/// Maximal convex regions of delegable nodes, each sorted by node id.
pub fn enumerate_candidates(g: &Graph) -> Vec<Vec<NodeId>> {
    let adj = g.adjacency();
    let n = g.node_count();
    let mut ds = DisjointSet::new(n);
    for a in g.node_ids().filter(|&a| eligible(g, a)) {
        for &b in &adj.succ[a.0] {
            if eligible(g, b) {
                ds.union(a.0, b.0);
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<NodeId>> = BTreeMap::new();
    for a in g.node_ids().filter(|&a| eligible(g, a)) {
        groups.entry(ds.find(a.0)).or_default().insert(a);
    }

    let order = g
        .topo_order(&adj)
        .expect("candidates are enumerated on validated graphs");
    let mut pos = vec![0; n];
    for (i, v) in order.iter().enumerate() {
        pos[v.0] = i;
    }
    let mut search = TaintSearch::new(pos);
    let mut region_of: Vec<Option<usize>> = vec![None; n];
    let mut regions: Vec<Vec<NodeId>> = Vec::new();
    let mut work: VecDeque<BTreeSet<NodeId>> = groups.into_values().collect();
    while let Some(c) = work.pop_front() {
        let bad = search.tainted(&adj, &c, &region_of, &regions);
        let clean: BTreeSet<NodeId> = c.difference(&bad).copied().collect();
        debug_assert!(
            !clean.is_empty(),
            "the earliest member of a region is never tainted"
        );
        for comp in components(&adj, &clean) {
            for &m in &comp {
                region_of[m.0] = Some(regions.len());
            }
            regions.push(comp);
        }
        for (i, comp) in components(&adj, &bad).into_iter().enumerate() {
            work.insert(i, comp.into_iter().collect());
        }
    }
    regions
}

/// Evaluates every candidate and collapses the accepted ones.
pub fn prune_and_collapse(
    g: &Graph,
    candidates: &[Vec<NodeId>],
    thresholds: &DelegationThresholds,
    flop_cfg: &FlopConfig,
) -> Result<PartitionedGraph, PartitionError> {
    let mut audit = Vec::with_capacity(candidates.len());
    for c in candidates {
        let set: BTreeSet<NodeId> = c.iter().copied().collect();
        let stats = region_stats(g, &set, flop_cfg)?;
        let reason = evaluate(&stats, thresholds);
        audit.push(DelegateRegion {
            nodes: set.into_iter().collect(),
            stats,
            accepted: reason.is_none(),
            reason,
        });
    }
    collapse(g, audit)
}

/// Collapses every candidate regardless of cost, modelling naive delegation.
pub fn collapse_all(
    g: &Graph,
    candidates: &[Vec<NodeId>],
    flop_cfg: &FlopConfig,
) -> Result<PartitionedGraph, PartitionError> {
    let mut audit = Vec::with_capacity(candidates.len());
    for c in candidates {
        let set: BTreeSet<NodeId> = c.iter().copied().collect();
        audit.push(DelegateRegion {
            stats: region_stats(g, &set, flop_cfg)?,
            nodes: set.into_iter().collect(),
            accepted: true,
            reason: None,
        });
    }
    collapse(g, audit)
}

fn collapse(g: &Graph, audit: Vec<DelegateRegion>) -> Result<PartitionedGraph, PartitionError> {
    let accepted: Vec<&DelegateRegion> = audit.iter().filter(|r| r.accepted).collect();
    let mut owner: Vec<Option<usize>> = vec![None; g.node_count()];
    for (k, r) in accepted.iter().enumerate() {
        for &n in &r.nodes {
            if owner[n.0].replace(k).is_some() {
                return Err(PartitionError::Invariant(format!(
                    "node '{}' belongs to two regions",
                    g.node(n).name
                )));
            }
        }
    }

    // A tensor survives unless it is produced inside a region and never
    // seen outside it, or it is a constant used only inside regions.
    let inside = |n: NodeId| owner[n.0].is_some();
    let region_local = |t: TensorId| -> bool {
        let td = g.tensor(t);
        match td.producer {
            Producer::Node(p) => {
                let Some(k) = owner[p.0] else { return false };
                !g.is_graph_output(t)
                    && !td.consumers.is_empty()
                    && td.consumers.iter().all(|&c| owner[c.0] == Some(k))
            }
            Producer::Constant => {
                !td.consumers.is_empty() && td.consumers.iter().all(|&c| inside(c))
            }
            _ => false,
        }
    };

    let taken: HashSet<&str> = g.nodes().iter().map(|n| n.name.as_str()).collect();
    let mut names = Vec::with_capacity(accepted.len());
    for k in 0..accepted.len() {
        let mut name = format!("delegate_{k}");
        let mut bump = 1;
        while taken.contains(name.as_str()) {
            name = format!("delegate_{k}_{bump}");
            bump += 1;
        }
        names.push(name);
    }

    let original = g.to_doc();
    let mut doc = GraphDoc {
        tensors: Vec::new(),
        nodes: Vec::new(),
        inputs: original.inputs.clone(),
        outputs: original.outputs.clone(),
    };
    for (i, t) in original.tensors.iter().enumerate() {
        if !region_local(TensorId(i)) {
            doc.tensors.push(t.clone());
        }
    }
    let mut emitted = vec![false; accepted.len()];
    let mut delegate_pos = vec![0usize; accepted.len()];
    for n in g.node_ids() {
        let Some(k) = owner[n.0] else {
            doc.nodes.push(original.nodes[n.0].clone());
            continue;
        };
        if std::mem::replace(&mut emitted[k], true) {
            continue;
        }
        let region = accepted[k];
        let members: BTreeSet<NodeId> = region.nodes.iter().copied().collect();
        let mut inputs: Vec<TensorId> = Vec::new();
        let mut outputs: Vec<TensorId> = Vec::new();
        for &m in &region.nodes {
            for &t in &g.node(m).inputs {
                let td = g.tensor(t);
                let external = match td.producer {
                    Producer::Node(p) => !members.contains(&p),
                    Producer::Constant => !region_local(t),
                    _ => true,
                };
                if external && !inputs.contains(&t) {
                    inputs.push(t);
                }
            }
            for &t in &g.node(m).outputs {
                if !region_local(t) && !outputs.contains(&t) {
                    outputs.push(t);
                }
            }
        }
        let tname = |t: &TensorId| g.tensor(*t).name.clone();
        let mut attrs = serde_json::Map::new();
        attrs.insert(
            "members".into(),
            json!(region
                .nodes
                .iter()
                .map(|&m| g.node(m).name.clone())
                .collect::<Vec<_>>()),
        );
        attrs.insert("macs".into(), json!(region.stats.flops));
        attrs.insert("boundary_bytes".into(), json!(region.stats.boundary_bytes));
        delegate_pos[k] = doc.nodes.len();
        doc.nodes.push(NodeDoc {
            id: names[k].clone(),
            op: DELEGATE_OP.into(),
            inputs: inputs.iter().map(tname).collect(),
            outputs: outputs.iter().map(tname).collect(),
            attrs,
            device_support: vec![Device::Accelerator],
            control_flow: false,
        });
    }

    let graph = Graph::from_doc(&doc)?;
    graph
        .topo_order(&graph.adjacency())
        .map_err(|e| PartitionError::Invariant(format!("collapse produced a cycle: {e}")))?;
    let delegates = accepted
        .iter()
        .enumerate()
        .map(|(k, r)| DelegateInfo {
            node: NodeId(delegate_pos[k]),
            name: names[k].clone(),
            members: r.nodes.clone(),
            stats: r.stats,
        })
        .collect();
    Ok(PartitionedGraph {
        graph,
        delegates,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DType, GraphDoc};

    /// `x -> n0 -> ... -> n{k-1}`; accelerator flags per node.
    fn chain(acc: &[bool]) -> Graph {
        let mut doc = GraphDoc::default();
        doc.tensor("t0", DType::F32, &[1, 16]);
        for (i, &a) in acc.iter().enumerate() {
            doc.tensor(&format!("t{}", i + 1), DType::F32, &[1, 16]);
            let node = doc.node(
                &format!("n{i}"),
                "Relu",
                &[&format!("t{i}")],
                &[&format!("t{}", i + 1)],
            );
            if a {
                node.on_accelerator();
            }
        }
        doc.inputs = vec!["t0".into()];
        doc.outputs = vec![format!("t{}", acc.len())];
        Graph::from_doc(&doc).unwrap()
    }

    #[test]
    fn all_cpu_graph_has_no_candidates() {
        assert!(enumerate_candidates(&chain(&[false; 5])).is_empty());
    }

    #[test]
    fn accelerator_chain_is_one_region() {
        let c = enumerate_candidates(&chain(&[true; 10]));
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 10);
    }

    #[test]
    fn cpu_node_splits_chain() {
        let c = enumerate_candidates(&chain(&[true, true, false, true, true]));
        assert_eq!(
            c,
            vec![vec![NodeId(0), NodeId(1)], vec![NodeId(3), NodeId(4)]]
        );
    }

    #[test]
    fn reentrant_path_splits_region() {
        // a -> b, a -> cpu -> b: collapsing {a, b} would form a cycle.
        let mut doc = GraphDoc::default();
        doc.tensor("x", DType::F32, &[4]);
        for t in ["p", "q", "y"] {
            doc.tensor(t, DType::F32, &[4]);
        }
        doc.node("a", "Relu", &["x"], &["p"]).on_accelerator();
        doc.node("c", "Relu", &["p"], &["q"]);
        doc.node("b", "Add", &["p", "q"], &["y"]).on_accelerator();
        doc.inputs = vec!["x".into()];
        doc.outputs = vec!["y".into()];
        let g = Graph::from_doc(&doc).unwrap();
        let c = enumerate_candidates(&g);
        assert_eq!(c, vec![vec![NodeId(0)], vec![NodeId(2)]]);
    }

    #[test]
    fn jointly_convex_after_contraction() {
        // Two individually convex regions {a, b} and {x, y} with
        // a -> c1 -> y and x -> c2 -> b; collapsing both would cycle.
        let mut doc = GraphDoc::default();
        for t in ["i0", "i1", "ta", "tx", "tc1", "tc2", "tb", "ty"] {
            doc.tensor(t, DType::F32, &[4]);
        }
        doc.node("a", "Relu", &["i0"], &["ta"]).on_accelerator();
        doc.node("x", "Relu", &["i1"], &["tx"]).on_accelerator();
        doc.node("c1", "Relu", &["ta"], &["tc1"]);
        doc.node("c2", "Relu", &["tx"], &["tc2"]);
        doc.node("b", "Add", &["ta", "tc2"], &["tb"])
            .on_accelerator();
        doc.node("y", "Add", &["tx", "tc1"], &["ty"])
            .on_accelerator();
        doc.inputs = vec!["i0".into(), "i1".into()];
        doc.outputs = vec!["tb".into(), "ty".into()];
        let g = Graph::from_doc(&doc).unwrap();
        let c = enumerate_candidates(&g);
        assert_eq!(c.len(), 3);
        let all = collapse_all(&g, &c, &FlopConfig::default()).unwrap();
        assert_eq!(all.delegates.len(), 3);
    }

    #[test]
    fn small_region_stays_on_cpu() {
        let g = chain(&[true, true, false]);
        let c = enumerate_candidates(&g);
        let p = prune_and_collapse(
            &g,
            &c,
            &DelegationThresholds::default(),
            &FlopConfig::default(),
        )
        .unwrap();
        assert_eq!(p.audit[0].reason, Some(RejectReason::TooFewNodes));
        assert!(p.delegates.is_empty());
        assert_eq!(p.graph, g);
    }

    #[test]
    fn collapse_rewrites_boundary() {
        let g = chain(&[false, true, true, true, false]);
        let c = enumerate_candidates(&g);
        let loose = DelegationThresholds {
            min_nodes: 3,
            min_flops: 1.0,
            max_bytes_per_mac: 100.0,
        };
        let p = prune_and_collapse(&g, &c, &loose, &FlopConfig::default()).unwrap();
        assert_eq!(p.graph.node_count(), 3);
        let d = p.graph.node(p.delegates[0].node);
        assert!(d.is_delegate());
        assert_eq!(p.graph.tensor(d.inputs[0]).name, "t1");
        assert_eq!(p.graph.tensor(d.outputs[0]).name, "t4");
        assert!(p.graph.tensor_id("t2").is_none());
        assert_eq!(d.attr_f64("macs"), Some(48.0));
        assert_eq!(
            p.cpu_node_count() + p.delegates[0].members.len(),
            g.node_count()
        );
    }
}
