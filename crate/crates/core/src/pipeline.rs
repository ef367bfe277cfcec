//! End-to-end driver: validate, partition, decompose, plan, schedule, simulate.

use serde::Serialize;

use crate::cost::{node_flops, CostModelParams, DelegationThresholds, FlopConfig};
use crate::graph::{infer_shapes, validate, Graph};
use crate::memplan::{
    compute_liveness, cross_arena_share, estimate_peak, plan_arena, ArenaPlan,
    BranchMemoryEstimate, PlanConfig, SharedPool,
};
use crate::partition::{collapse_all, enumerate_candidates, prune_and_collapse, PartitionedGraph};
use crate::schedule::{
    branch_time, build_schedule, compare_naive, compute_budget, simulate, thread_sweep, Budget,
    MarginMode, NaiveComparison, Schedule, SimConfig, SimReport, SweepPoint,
};
use crate::structure::{PlanStructure, RefineConfig, StructureCounts};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub params: CostModelParams,
    pub thresholds: DelegationThresholds,
    pub flops: FlopConfig,
    pub refine: RefineConfig,
    pub plan: PlanConfig,
    pub free_memory_bytes: u64,
    pub margin: f64,
    pub margin_mode: MarginMode,
    pub sim: SimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            params: CostModelParams::default(),
            thresholds: DelegationThresholds::default(),
            flops: FlopConfig::default(),
            refine: RefineConfig::default(),
            plan: PlanConfig::default(),
            free_memory_bytes: 4 << 30,
            margin: 0.4,
            margin_mode: MarginMode::Reserve,
            sim: SimConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn budget(&self) -> Result<Budget, Error> {
        Ok(compute_budget(
            self.free_memory_bytes,
            self.margin,
            self.margin_mode,
        )?)
    }
}

/// Runs the structural checks and shape inference; any hard finding is an error.
pub fn prepare(g: &Graph) -> Result<Graph, Error> {
    let report = validate(g);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if !report.is_ok() {
        return Err(Error::Validation(report.failures()));
    }
    Ok(infer_shapes(g)?)
}

pub fn graph_flops(g: &Graph, cfg: &FlopConfig) -> Result<Vec<f64>, Error> {
    g.node_ids().map(|n| Ok(node_flops(g, n, cfg)?)).collect()
}

pub fn structure_of(g: &Graph, cfg: &PipelineConfig) -> Result<PlanStructure, Error> {
    let flops = graph_flops(g, &cfg.flops)?;
    Ok(PlanStructure::build(g, &flops, &cfg.refine)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StructureReport {
    /// The input graph, before any delegation.
    pub pre: StructureCounts,
    /// Every candidate region delegated.
    pub post: StructureCounts,
    /// Only cost-model-approved regions delegated.
    pub parallax: StructureCounts,
    pub candidates: usize,
    pub accepted: usize,
}

pub fn analyze(g: &Graph, cfg: &PipelineConfig) -> Result<StructureReport, Error> {
    let g = prepare(g)?;
    let candidates = enumerate_candidates(&g);
    let post = collapse_all(&g, &candidates, &cfg.flops)?;
    let pruned = prune_and_collapse(&g, &candidates, &cfg.thresholds, &cfg.flops)?;
    Ok(StructureReport {
        pre: structure_of(&g, cfg)?.counts(),
        post: structure_of(&post.graph, cfg)?.counts(),
        parallax: structure_of(&pruned.graph, cfg)?.counts(),
        candidates: candidates.len(),
        accepted: pruned.delegates.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    /// Shape-resolved input graph.
    pub source: Graph,
    pub partitioned: PartitionedGraph,
    pub structure: PlanStructure,
    pub flops: Vec<f64>,
    pub arenas: Vec<ArenaPlan>,
    pub estimates: Vec<BranchMemoryEstimate>,
    pub pool: SharedPool,
    pub schedule: Schedule,
    pub branch_times: Vec<f64>,
    pub comparison: NaiveComparison,
}

impl PlanOutput {
    pub fn peaks(&self) -> Vec<u64> {
        self.estimates.iter().map(|e| e.peak_bytes).collect()
    }
}

pub fn plan(g: &Graph, cfg: &PipelineConfig) -> Result<PlanOutput, Error> {
    let source = prepare(g)?;
    let candidates = enumerate_candidates(&source);
    let partitioned = prune_and_collapse(&source, &candidates, &cfg.thresholds, &cfg.flops)?;
    let pg = &partitioned.graph;
    let flops = graph_flops(pg, &cfg.flops)?;
    let structure = PlanStructure::build(pg, &flops, &cfg.refine)?;

    let mut arenas = Vec::with_capacity(structure.branches.len());
    let mut estimates = Vec::with_capacity(structure.branches.len());
    for b in &structure.branches {
        let live = compute_liveness(pg, &b.nodes)?;
        for w in &live.warnings {
            log::warn!("branch {}: {w}", b.id);
        }
        estimates.push(estimate_peak(b.id, &live));
        arenas.push(plan_arena(b.id, &live, &cfg.plan));
    }
    let sizes: Vec<u64> = arenas.iter().map(|a| a.arena_size_bytes).collect();
    let layer_members: Vec<Vec<usize>> = structure
        .layers
        .iter()
        .map(|l| l.branches.clone())
        .collect();
    let pool = cross_arena_share(&sizes, &layer_members)?;
    let peaks: Vec<u64> = estimates.iter().map(|e| e.peak_bytes).collect();
    let schedule = build_schedule(&structure, &peaks, cfg.budget()?, cfg.refine.max_threads)?;
    let branch_times = structure
        .branches
        .iter()
        .map(|b| branch_time(pg, b, &flops, &cfg.params))
        .collect();
    let comparison = compare_naive(&arenas);
    Ok(PlanOutput {
        source,
        partitioned,
        structure,
        flops,
        arenas,
        estimates,
        pool,
        schedule,
        branch_times,
        comparison,
    })
}

pub fn run_simulation(
    p: &PlanOutput,
    threads: usize,
    cfg: &PipelineConfig,
) -> Result<SimReport, Error> {
    Ok(simulate(
        &p.schedule,
        &p.branch_times,
        &p.peaks(),
        threads,
        &cfg.sim,
    )?)
}

pub fn run_sweep(
    p: &PlanOutput,
    max_threads: usize,
    cfg: &PipelineConfig,
) -> Result<Vec<SweepPoint>, Error> {
    Ok(thread_sweep(
        &p.structure,
        &p.peaks(),
        &p.branch_times,
        p.schedule.budget,
        max_threads,
        &cfg.sim,
    )?)
}
