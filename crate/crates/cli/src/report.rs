//! JSON and text renderings of pipeline results.

use std::fmt::Write as _;
use std::path::Path;

use parallax_core::pipeline::{PipelineConfig, PlanOutput, StructureReport};
use parallax_core::schedule::{SimReport, SweepPoint};
use parallax_core::structure::StructureCounts;
use serde_json::{json, Value};

const SCHEMA: u32 = 1;

fn counts_row(label: &str, c: &StructureCounts) -> String {
    format!(
        "{label:<10}{:>8}{:>10}{:>8}{:>12}{:>14}",
        c.nodes, c.branches, c.layers, c.parallel_layers, c.max_branches
    )
}

pub fn analyze_json(graph: &Path, r: &StructureReport) -> Value {
    json!({
        "schema": SCHEMA,
        "command": "analyze",
        "graph": graph.display().to_string(),
        "pre": r.pre,
        "post": r.post,
        "parallax": r.parallax,
        "candidates": r.candidates,
        "accepted": r.accepted,
    })
}

pub fn analyze_text(r: &StructureReport) -> String {
    let mut s = format!(
        "{:<10}{:>8}{:>10}{:>8}{:>12}{:>14}\n",
        "stage", "nodes", "branches", "layers", "par-layers", "max-branches"
    );
    for (label, c) in [
        ("pre", &r.pre),
        ("post", &r.post),
        ("parallax", &r.parallax),
    ] {
        s.push_str(&counts_row(label, c));
        s.push('\n');
    }
    let _ = writeln!(
        s,
        "delegated {} of {} candidate regions",
        r.accepted, r.candidates
    );
    s
}

fn branches_json(p: &PlanOutput) -> Vec<Value> {
    let g = &p.partitioned.graph;
    let layer_of = p.structure.layer_of();
    p.structure
        .branches
        .iter()
        .map(|b| {
            let arena = &p.arenas[b.id];
            let est = &p.estimates[b.id];
            let assignment: serde_json::Map<String, Value> = arena
                .assignment
                .iter()
                .map(|(t, buf)| (g.tensor(*t).name.clone(), json!(buf)))
                .collect();
            let intervals: Vec<Value> = arena
                .intervals
                .iter()
                .map(|iv| {
                    json!({
                        "tensor": g.tensor(iv.tensor).name,
                        "def_step": iv.def_step,
                        "last_use_step": iv.last_use_step,
                        "size_bytes": iv.size_bytes,
                    })
                })
                .collect();
            json!({
                "id": b.id,
                "layer": layer_of[b.id],
                "nodes": b.nodes.iter().map(|&n| g.node(n).name.clone()).collect::<Vec<_>>(),
                "flops": b.flops,
                "contains_delegate": b.contains_delegate,
                "peak_bytes": est.peak_bytes,
                "peak_step": est.peak_step,
                "time_s": p.branch_times[b.id],
                "timing": if is_offloaded(p, b.id) { "offload" } else { "cpu" },
                "arena": {
                    "size_bytes": arena.arena_size_bytes,
                    "naive_bytes": arena.naive_bytes(),
                    "buffers": arena.buffers,
                    "assignment": assignment,
                    "intervals": intervals,
                },
            })
        })
        .collect()
}

fn is_offloaded(p: &PlanOutput, branch: usize) -> bool {
    let b = &p.structure.branches[branch];
    b.contains_delegate && b.nodes.len() == 1
}

fn delegates_json(p: &PlanOutput) -> Vec<Value> {
    p.partitioned
        .delegates
        .iter()
        .map(|d| {
            json!({
                "name": d.name,
                "members": d.members.iter().map(|&m| p.source.node(m).name.clone()).collect::<Vec<_>>(),
                "stats": d.stats,
            })
        })
        .collect()
}

fn plan_body(graph: &Path, cfg: &PipelineConfig, p: &PlanOutput, command: &str) -> Value {
    json!({
        "schema": SCHEMA,
        "command": command,
        "graph": graph.display().to_string(),
        "config": cfg,
        "structure": p.structure.counts(),
        "delegates": delegates_json(p),
        "audit": p.partitioned.audit_json(&p.source),
        "layers": p.structure.layers,
        "branches": branches_json(p),
        "schedule": p.schedule,
        "shared_pool": p.pool,
        "comparison": p.comparison,
    })
}

pub fn plan_json(graph: &Path, cfg: &PipelineConfig, p: &PlanOutput) -> Value {
    plan_body(graph, cfg, p, "plan")
}

fn schedule_text(p: &PlanOutput, s: &mut String) {
    let peaks = p.peaks();
    for (l, sl) in p.structure.layers.iter().zip(&p.schedule.layers) {
        let _ = writeln!(
            s,
            "layer {:>4}: {} branch(es){}  parallel {:?}  sequential {:?}  residency {} B",
            l.index,
            l.branches.len(),
            if l.parallel_eligible {
                " [eligible]"
            } else {
                ""
            },
            sl.parallel,
            sl.sequential,
            sl.peak_residency_bytes
        );
    }
    let _ = writeln!(
        s,
        "budget {} B of {} B free; largest branch peak {} B",
        p.schedule.budget.budget_bytes,
        p.schedule.budget.free_memory_bytes,
        peaks.iter().copied().max().unwrap_or(0)
    );
}

pub fn plan_text(p: &PlanOutput) -> String {
    let c = p.structure.counts();
    let mut s = format!(
        "{} nodes ({} delegates), {} branches, {} layers ({} parallel-eligible, max width {})\n",
        c.nodes,
        p.partitioned.delegates.len(),
        c.branches,
        c.layers,
        c.parallel_layers,
        c.max_branches
    );
    schedule_text(p, &mut s);
    let _ = writeln!(
        s,
        "arenas: planned {} B vs naive {} B ({:.1}% reduction); shared pool {} B",
        p.comparison.planned_bytes,
        p.comparison.naive_bytes,
        p.comparison.reduction_pct,
        p.pool.pool_bytes
    );
    s
}

pub fn simulate_json(
    graph: &Path,
    cfg: &PipelineConfig,
    p: &PlanOutput,
    sim: &SimReport,
    sweep: Option<&[SweepPoint]>,
) -> Value {
    let mut v = plan_body(graph, cfg, p, "simulate");
    v["simulation"] = json!(sim);
    if let Some(points) = sweep {
        v["sweep"] = json!(points);
    }
    v
}

pub fn simulate_text(p: &PlanOutput, sim: &SimReport, sweep: Option<&[SweepPoint]>) -> String {
    let mut s = plan_text(p);
    let _ = writeln!(
        s,
        "simulated with {} thread(s): {:.6} s end to end, {:.6} s all sequential, peak residency {} B",
        sim.threads, sim.end_to_end_s, sim.all_sequential_s, sim.peak_residency_bytes
    );
    if let Some(points) = sweep {
        s.push_str("threads  latency_s\n");
        for pt in points {
            let _ = writeln!(s, "{:>7}  {:.6}", pt.threads, pt.latency_s);
        }
    }
    s
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("threads,latency_s\n");
    for pt in points {
        let _ = writeln!(s, "{},{}", pt.threads, pt.latency_s);
    }
    s
}
