//! Region cost model: MAC counts, boundary traffic and the offload decision.

mod flops;

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, NodeId, Producer};

pub use flops::{node_flops, FlopConfig};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("node '{node}': missing or invalid '{attr}' for its op class")]
    MissingAttr { node: String, attr: String },
    #[error("node '{node}': tensor '{tensor}' has no resolved shape")]
    UnresolvedShape { node: String, tensor: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("region is empty")]
    EmptyRegion,
    #[error("region node index {0} does not exist")]
    UnknownNode(usize),
    #[error("region containing '{first}' is disconnected ('{stray}' unreachable)")]
    Disconnected { first: String, stray: String },
    #[error("invalid cost-model parameters: {0}")]
    InvalidParams(String),
}

/// Device constants. Rates are MAC/s, bandwidth bytes/s, latency seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    pub dispatch_latency: f64,
    pub acc_throughput: f64,
    pub cpu_throughput: f64,
    pub mem_bandwidth: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        CostModelParams {
            dispatch_latency: 0.2e-3,
            acc_throughput: 2.6e13,
            cpu_throughput: 1e9,
            mem_bandwidth: 51.2e9,
        }
    }
}

impl CostModelParams {
    pub fn new(l: f64, r_acc: f64, r_cpu: f64, b_bw: f64) -> Result<Self, CostError> {
        let p = CostModelParams {
            dispatch_latency: l,
            acc_throughput: r_acc,
            cpu_throughput: r_cpu,
            mem_bandwidth: b_bw,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), CostError> {
        let fields = [
            ("L", self.dispatch_latency),
            ("R_acc", self.acc_throughput),
            ("R_cpu", self.cpu_throughput),
            ("B_bw", self.mem_bandwidth),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(CostError::InvalidParams(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.acc_throughput <= self.cpu_throughput {
            return Err(CostError::InvalidParams(format!(
                "R_acc ({}) must exceed R_cpu ({})",
                self.acc_throughput, self.cpu_throughput
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionStats {
    pub node_count: usize,
    pub flops: f64,
    pub boundary_bytes: u64,
    /// `B / F`, or `+inf` when the region does no compute.
    #[serde(serialize_with = "ser_ratio")]
    pub bytes_per_mac: f64,
}

fn ser_ratio<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

impl RegionStats {
    pub fn new(node_count: usize, flops: f64, boundary_bytes: u64) -> Self {
        let bytes_per_mac = if flops > 0.0 {
            boundary_bytes as f64 / flops
        } else {
            f64::INFINITY
        };
        RegionStats {
            node_count,
            flops,
            boundary_bytes,
            bytes_per_mac,
        }
    }
}

/// N, F and B for a connected set of nodes. Constants are not boundary traffic.
pub fn region_stats(
    g: &Graph,
    region: &BTreeSet<NodeId>,
    cfg: &FlopConfig,
) -> Result<RegionStats, CostError> {
    let Some(&first) = region.iter().next() else {
        return Err(CostError::EmptyRegion);
    };
    if let Some(bad) = region.iter().find(|n| n.0 >= g.node_count()) {
        return Err(CostError::UnknownNode(bad.0));
    }
    check_connected(g, region, first)?;

    let mut flops = 0.0;
    for &n in region {
        flops += node_flops(g, n, cfg)?;
    }
    let mut boundary = BTreeSet::new();
    for &n in region {
        let node = g.node(n);
        for &t in &node.inputs {
            let td = g.tensor(t);
            let external = match td.producer {
                Producer::Node(p) => !region.contains(&p),
                Producer::GraphInput | Producer::Missing => true,
                Producer::Constant => false,
            };
            if external {
                boundary.insert(t);
            }
        }
        for &t in &node.outputs {
            let td = g.tensor(t);
            if g.is_graph_output(t) || td.consumers.iter().any(|c| !region.contains(c)) {
                boundary.insert(t);
            }
        }
    }
    let bytes = boundary
        .iter()
        .map(|&t| g.tensor(t).byte_size().unwrap_or(0))
        .sum();
    Ok(RegionStats::new(region.len(), flops, bytes))
}

fn check_connected(g: &Graph, region: &BTreeSet<NodeId>, first: NodeId) -> Result<(), CostError> {
    let mut seen = BTreeSet::from([first]);
    let mut queue = VecDeque::from([first]);
    while let Some(n) = queue.pop_front() {
        let node = g.node(n);
        let preds = node
            .inputs
            .iter()
            .filter_map(|&t| match g.tensor(t).producer {
                Producer::Node(p) => Some(p),
                _ => None,
            });
        let succs = node
            .outputs
            .iter()
            .flat_map(|&t| g.tensor(t).consumers.iter().copied());
        for m in preds.chain(succs) {
            if region.contains(&m) && seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    match region.iter().find(|n| !seen.contains(n)) {
        Some(&stray) => Err(CostError::Disconnected {
            first: g.node(first).name.clone(),
            stray: g.node(stray).name.clone(),
        }),
        None => Ok(()),
    }
}

pub fn offload_time(s: &RegionStats, p: &CostModelParams) -> f64 {
    p.dispatch_latency + s.flops / p.acc_throughput + s.boundary_bytes as f64 / p.mem_bandwidth
}

pub fn cpu_time(s: &RegionStats, p: &CostModelParams) -> f64 {
    s.flops / p.cpu_throughput
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelegationThresholds {
    pub min_nodes: usize,
    pub min_flops: f64,
    pub max_bytes_per_mac: f64,
}

impl Default for DelegationThresholds {
    fn default() -> Self {
        DelegationThresholds {
            min_nodes: 3,
            min_flops: 1e9,
            max_bytes_per_mac: 0.1,
        }
    }
}

impl DelegationThresholds {
    pub fn check(&self) -> Result<(), CostError> {
        if self.min_nodes == 0
            || !(self.min_flops.is_finite() && self.min_flops > 0.0)
            || !(self.max_bytes_per_mac.is_finite() && self.max_bytes_per_mac > 0.0)
        {
            return Err(CostError::InvalidParams(format!(
                "thresholds must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// How the operational thresholds are obtained from the exact bounds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Relaxation {
    /// The fixed relaxed values `(3, 1e9, 0.1)`.
    #[default]
    Fixed,
    /// Use the exact bounds directly.
    Exact,
    /// Multiply the compute bound and the bytes/MAC bound by constant factors.
    Scaled {
        flops_factor: f64,
        ratio_factor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdDerivation {
    /// `L * R_cpu`: MACs the CPU retires during one dispatch.
    pub exact_min_flops: f64,
    /// `B_bw / R_acc`: traffic per MAC at which the accelerator turns memory bound.
    pub exact_max_bytes_per_mac: f64,
    pub thresholds: DelegationThresholds,
}

pub fn derive_thresholds(p: &CostModelParams, relax: Relaxation) -> ThresholdDerivation {
    let exact_min_flops = p.dispatch_latency * p.cpu_throughput;
    let exact_max_bytes_per_mac = p.mem_bandwidth / p.acc_throughput;
    let thresholds = match relax {
        Relaxation::Fixed => DelegationThresholds::default(),
        Relaxation::Exact => DelegationThresholds {
            min_nodes: 3,
            min_flops: exact_min_flops,
            max_bytes_per_mac: exact_max_bytes_per_mac,
        },
        Relaxation::Scaled {
            flops_factor,
            ratio_factor,
        } => DelegationThresholds {
            min_nodes: 3,
            min_flops: exact_min_flops * flops_factor,
            max_bytes_per_mac: exact_max_bytes_per_mac * ratio_factor,
        },
    };
    ThresholdDerivation {
        exact_min_flops,
        exact_max_bytes_per_mac,
        thresholds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewNodes,
    TooLittleCompute,
    MemoryBound,
}

/// The first failing conjunct, in the order nodes, compute, traffic.
pub fn evaluate(s: &RegionStats, t: &DelegationThresholds) -> Option<RejectReason> {
    if s.node_count < t.min_nodes {
        Some(RejectReason::TooFewNodes)
    } else if s.flops < t.min_flops {
        Some(RejectReason::TooLittleCompute)
    } else if s.bytes_per_mac > t.max_bytes_per_mac {
        Some(RejectReason::MemoryBound)
    } else {
        None
    }
}

pub fn should_offload(s: &RegionStats, t: &DelegationThresholds) -> bool {
    evaluate(s, t).is_none()
}

/// Device profile file: the four constants plus optional threshold overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    #[serde(rename = "L_sec")]
    pub l_sec: f64,
    #[serde(rename = "R_acc")]
    pub r_acc: f64,
    #[serde(rename = "R_cpu")]
    pub r_cpu: f64,
    #[serde(rename = "B_bw")]
    pub b_bw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_flops: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_bytes_per_mac: Option<f64>,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        let p = CostModelParams::default();
        DeviceProfile {
            l_sec: p.dispatch_latency,
            r_acc: p.acc_throughput,
            r_cpu: p.cpu_throughput,
            b_bw: p.mem_bandwidth,
            min_nodes: None,
            min_flops: None,
            max_bytes_per_mac: None,
        }
    }
}

impl DeviceProfile {
    pub fn params(&self) -> Result<CostModelParams, CostError> {
        CostModelParams::new(self.l_sec, self.r_acc, self.r_cpu, self.b_bw)
    }

    pub fn apply_overrides(
        &self,
        mut t: DelegationThresholds,
    ) -> Result<DelegationThresholds, CostError> {
        if let Some(v) = self.min_nodes {
            t.min_nodes = v;
        }
        if let Some(v) = self.min_flops {
            t.min_flops = v;
        }
        if let Some(v) = self.max_bytes_per_mac {
            t.max_bytes_per_mac = v;
        }
        t.check()?;
        Ok(t)
    }
}
