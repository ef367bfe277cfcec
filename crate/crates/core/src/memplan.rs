//! Branch-private arena planning.
//!
//! Each branch owns one arena. Tensors defined in the branch are placed by
//! replaying its steps: outputs are allocated first (best-fit from the free
//! list, otherwise bump), then tensors whose last use is this step return
//! their buffer to the free list. Buffers are never split or coalesced.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::graph::{Graph, NodeId, Producer, TensorId};

#[derive(Debug, Error, PartialEq)]
pub enum MemPlanError {
    #[error("tensor {tensor} is not planned in the arena of branch {branch}")]
    ForeignTensor { tensor: TensorId, branch: usize },
    #[error("branches {a} and {b} share arena space while both run in layer {layer}")]
    SameLayerShare { a: usize, b: usize, layer: usize },
    #[error("tensor '{0}' has no resolved size")]
    Unsized(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LivenessInterval {
    pub tensor: TensorId,
    pub def_step: usize,
    pub last_use_step: usize,
    pub size_bytes: u64,
}

impl LivenessInterval {
    pub fn overlaps(&self, other: &LivenessInterval) -> bool {
        self.def_step <= other.last_use_step && other.def_step <= self.last_use_step
    }

    pub fn live_at(&self, step: usize) -> bool {
        self.def_step <= step && step <= self.last_use_step
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Liveness {
    /// In definition order.
    pub intervals: Vec<LivenessInterval>,
    pub steps: usize,
    pub warnings: Vec<String>,
}

/// Lifetimes of the non-constant tensors produced by `nodes`, in that order.
pub fn compute_liveness(g: &Graph, nodes: &[NodeId]) -> Result<Liveness, MemPlanError> {
    let step_of: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(s, &n)| (n, s)).collect();
    let end = nodes.len().saturating_sub(1);
    let mut out = Liveness {
        steps: nodes.len(),
        ..Liveness::default()
    };
    for (step, &n) in nodes.iter().enumerate() {
        for &t in &g.node(n).outputs {
            let td = g.tensor(t);
            if td.constant || td.producer != Producer::Node(n) {
                continue;
            }
            let size = td
                .byte_size()
                .ok_or_else(|| MemPlanError::Unsized(td.name.clone()))?;
            let escapes =
                g.is_graph_output(t) || td.consumers.iter().any(|c| !step_of.contains_key(c));
            let last = if escapes {
                end
            } else if td.consumers.is_empty() {
                out.warnings
                    .push(format!("tensor '{}' is never consumed", td.name));
                step
            } else {
                td.consumers
                    .iter()
                    .map(|c| step_of[c])
                    .max()
                    .expect("nonempty")
                    .max(step)
            };
            out.intervals.push(LivenessInterval {
                tensor: t,
                def_step: step,
                last_use_step: last,
                size_bytes: size,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlanConfig {
    pub alignment: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { alignment: 64 }
    }
}

impl PlanConfig {
    pub fn align(&self, bytes: u64) -> u64 {
        let a = self.alignment.max(1);
        bytes.div_ceil(a) * a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Buffer {
    pub id: usize,
    pub offset: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Alloc {
        step: usize,
        tensor: TensorId,
        buffer: usize,
        reused: bool,
    },
    Free {
        step: usize,
        tensor: TensorId,
        buffer: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArenaPlan {
    pub branch: usize,
    pub buffers: Vec<Buffer>,
    pub assignment: BTreeMap<TensorId, usize>,
    pub arena_size_bytes: u64,
    pub intervals: Vec<LivenessInterval>,
    pub trace: Vec<TraceEvent>,
    #[serde(skip)]
    config: PlanConfig,
}

pub fn plan_arena(branch: usize, liveness: &Liveness, cfg: &PlanConfig) -> ArenaPlan {
    let mut plan = ArenaPlan {
        branch,
        buffers: Vec::new(),
        assignment: BTreeMap::new(),
        arena_size_bytes: 0,
        intervals: liveness.intervals.clone(),
        trace: Vec::new(),
        config: *cfg,
    };
    let mut by_def: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut by_last: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, iv) in liveness.intervals.iter().enumerate() {
        by_def.entry(iv.def_step).or_default().push(i);
        by_last.entry(iv.last_use_step).or_default().push(i);
    }
    let mut free: BTreeSet<(u64, usize)> = BTreeSet::new();
    for step in 0..liveness.steps.max(1) {
        for &i in by_def.get(&step).into_iter().flatten() {
            let iv = liveness.intervals[i];
            let need = cfg.align(iv.size_bytes);
            let (buffer, reused) = match free.range((need, 0)..).next().copied() {
                Some(slot) => {
                    free.remove(&slot);
                    (slot.1, true)
                }
                None => (plan.bump(need), false),
            };
            plan.assignment.insert(iv.tensor, buffer);
            plan.trace.push(TraceEvent::Alloc {
                step,
                tensor: iv.tensor,
                buffer,
                reused,
            });
        }
        for &i in by_last.get(&step).into_iter().flatten() {
            let iv = liveness.intervals[i];
            let buffer = plan.assignment[&iv.tensor];
            free.insert((plan.buffers[buffer].capacity, buffer));
            plan.trace.push(TraceEvent::Free {
                step,
                tensor: iv.tensor,
                buffer,
            });
        }
    }
    plan
}

/// Outcome of [`apply_resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Resize {
    InPlace { buffer: usize },
    Reassigned { from: usize, to: usize },
    Grown { from: usize, to: usize },
}

impl ArenaPlan {
    fn bump(&mut self, capacity: u64) -> usize {
        let id = self.buffers.len();
        self.buffers.push(Buffer {
            id,
            offset: self.arena_size_bytes,
            capacity,
        });
        self.arena_size_bytes += capacity;
        id
    }

    pub fn interval(&self, t: TensorId) -> Option<&LivenessInterval> {
        self.intervals.iter().find(|iv| iv.tensor == t)
    }

    pub fn tensors_in(&self, buffer: usize) -> impl Iterator<Item = TensorId> + '_ {
        self.assignment
            .iter()
            .filter(move |(_, &b)| b == buffer)
            .map(|(&t, _)| t)
    }

    /// Every pair sharing a buffer whose lifetimes overlap. Empty for a valid plan.
    pub fn sharing_violations(&self) -> Vec<(TensorId, TensorId)> {
        let mut by_buffer: BTreeMap<usize, Vec<&LivenessInterval>> = BTreeMap::new();
        for iv in &self.intervals {
            if let Some(&b) = self.assignment.get(&iv.tensor) {
                by_buffer.entry(b).or_default().push(iv);
            }
        }
        let mut bad = Vec::new();
        for ivs in by_buffer.values() {
            for (i, a) in ivs.iter().enumerate() {
                for b in &ivs[i + 1..] {
                    if a.overlaps(b) {
                        bad.push((a.tensor, b.tensor));
                    }
                }
            }
        }
        bad
    }

    /// Sum of aligned tensor sizes: one buffer per tensor, no reuse.
    pub fn naive_bytes(&self) -> u64 {
        self.intervals
            .iter()
            .map(|iv| self.config.align(iv.size_bytes))
            .sum()
    }
}

/// Grows (or shrinks) a tensor inside its own branch's arena.
pub fn apply_resize(
    plan: &mut ArenaPlan,
    tensor: TensorId,
    new_size: u64,
) -> Result<Resize, MemPlanError> {
    let Some(&current) = plan.assignment.get(&tensor) else {
        return Err(MemPlanError::ForeignTensor {
            tensor,
            branch: plan.branch,
        });
    };
    let pos = plan
        .intervals
        .iter()
        .position(|iv| iv.tensor == tensor)
        .expect("assigned tensors have intervals");
    plan.intervals[pos].size_bytes = new_size;
    if new_size <= plan.buffers[current].capacity {
        return Ok(Resize::InPlace { buffer: current });
    }
    let me = plan.intervals[pos];
    let need = plan.config.align(new_size);
    let idle = plan
        .buffers
        .iter()
        .filter(|b| b.id != current && b.capacity >= need)
        .filter(|b| {
            plan.tensors_in(b.id)
                .all(|t| plan.interval(t).is_none_or(|iv| !iv.overlaps(&me)))
        })
        .min_by_key(|b| (b.capacity, b.id))
        .map(|b| b.id);
    let outcome = match idle {
        Some(to) => Resize::Reassigned { from: current, to },
        None => Resize::Grown {
            from: current,
            to: plan.bump(need),
        },
    };
    let (Resize::Reassigned { to, .. } | Resize::Grown { to, .. }) = outcome else {
        unreachable!()
    };
    plan.assignment.insert(tensor, to);
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BranchMemoryEstimate {
    pub branch: usize,
    pub peak_bytes: u64,
    pub peak_step: usize,
}

/// Running live total over the branch's steps; intervals are in def order.
pub fn estimate_peak(branch: usize, liveness: &Liveness) -> BranchMemoryEstimate {
    let steps = liveness.steps.max(1);
    let mut delta = vec![0i128; steps + 1];
    for iv in &liveness.intervals {
        delta[iv.def_step] += iv.size_bytes as i128;
        delta[iv.last_use_step + 1] -= iv.size_bytes as i128;
    }
    let (mut live, mut peak, mut peak_step) = (0i128, 0i128, 0);
    for (step, d) in delta.iter().take(steps).enumerate() {
        live += d;
        if live > peak {
            peak = live;
            peak_step = step;
        }
    }
    BranchMemoryEstimate {
        branch,
        peak_bytes: peak as u64,
        peak_step,
    }
}

/// Placement of one branch arena inside the shared pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PoolSlot {
    pub branch: usize,
    pub layer: usize,
    pub offset: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SharedPool {
    pub slots: Vec<PoolSlot>,
    /// Sum of arena sizes resident in each layer.
    pub layer_resident: Vec<u64>,
    pub pool_bytes: u64,
    /// What the arenas would take if none were shared.
    pub unshared_bytes: u64,
    /// `(donor, recipient)` pairs whose pool ranges overlap.
    pub donations: Vec<(usize, usize)>,
}

/// Lays out every layer's arenas from the start of one pool, so later
/// layers reuse the space of finished ones.
pub fn cross_arena_share(
    arena_sizes: &[u64],
    layers: &[Vec<usize>],
) -> Result<SharedPool, MemPlanError> {
    let mut slots = Vec::new();
    let mut layer_resident = Vec::with_capacity(layers.len());
    for (li, members) in layers.iter().enumerate() {
        let mut offset = 0;
        for &b in members {
            slots.push(PoolSlot {
                branch: b,
                layer: li,
                offset,
                size: arena_sizes[b],
            });
            offset += arena_sizes[b];
        }
        layer_resident.push(offset);
    }
    validate_share(&slots)?;
    let mut donations = Vec::new();
    for a in &slots {
        for b in &slots {
            if a.layer < b.layer && a.offset < b.offset + b.size && b.offset < a.offset + a.size {
                donations.push((a.branch, b.branch));
            }
        }
    }
    Ok(SharedPool {
        pool_bytes: layer_resident.iter().copied().max().unwrap_or(0),
        unshared_bytes: arena_sizes.iter().sum(),
        layer_resident,
        slots,
        donations,
    })
}

/// Rejects any overlap between arenas resident in the same layer.
pub fn validate_share(slots: &[PoolSlot]) -> Result<(), MemPlanError> {
    for (i, a) in slots.iter().enumerate() {
        for b in &slots[i + 1..] {
            let overlap = a.size > 0
                && b.size > 0
                && a.offset < b.offset + b.size
                && b.offset < a.offset + a.size;
            if a.layer == b.layer && overlap {
                return Err(MemPlanError::SameLayerShare {
                    a: a.branch,
                    b: b.branch,
                    layer: a.layer,
                });
            }
        }
    }
    Ok(())
}
