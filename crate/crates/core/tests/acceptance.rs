//! Acceptance criteria, one test per criterion. Each prints a PASS/FAIL line.

mod common;

use std::time::{Duration, Instant};

use common::*;
use parallax_core::cost::{
    cpu_time, derive_thresholds, offload_time, CostModelParams, DelegationThresholds, RegionStats,
    Relaxation,
};
use parallax_core::graph::{Graph, TensorId};
use parallax_core::memplan::{
    compute_liveness, estimate_peak, plan_arena, ArenaPlan, Liveness, LivenessInterval, PlanConfig,
};
use parallax_core::partition::{enumerate_candidates, prune_and_collapse};
use parallax_core::pipeline::{analyze, graph_flops, plan, run_sweep, structure_of};
use parallax_core::schedule::select_parallel_set;
use parallax_core::structure::PlanStructure;
use parallax_core::synth::{self, RandomDagConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn first<T: std::fmt::Debug>(x: Option<&T>) -> String {
    x.map(|x| format!("; first: {x:?}")).unwrap_or_default()
}

/// Whether the criterion held, plus a one-line summary of what was measured.
type Outcome = (bool, String);

fn rel_err(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}

fn c01_threshold_derivation() -> Outcome {
    let p = CostModelParams::new(0.2e-3, 2.6e13, 1e9, 51.2e9).unwrap();
    let t0 = Instant::now();
    let d = derive_thresholds(&p, Relaxation::Fixed);
    let elapsed = t0.elapsed();
    let e_flops = rel_err(d.exact_min_flops, 2e5);
    let e_ratio = rel_err(d.exact_max_bytes_per_mac, 0.002);
    let relaxed = d.thresholds
        == DelegationThresholds {
            min_nodes: 3,
            min_flops: 1e9,
            max_bytes_per_mac: 0.1,
        };
    let ok = e_flops <= 0.01 && e_ratio <= 0.01 && relaxed && elapsed < Duration::from_millis(1);
    (
        ok,
        format!(
            "F_min={:.6e} (rel err {:.4}%), B/F_max={:.7} (rel err {:.4}%), relaxed={:?}, {:?}",
            d.exact_min_flops,
            100.0 * e_flops,
            d.exact_max_bytes_per_mac,
            100.0 * e_ratio,
            (
                d.thresholds.min_nodes,
                d.thresholds.min_flops,
                d.thresholds.max_bytes_per_mac
            ),
            elapsed
        ),
    )
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn c02_cost_model_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = 20_000;
    let (mut checked, mut violations, mut tight_checked, mut tight_violations) = (0, 0, 0, 0);
    let mut worst: Option<(f64, f64, f64)> = None;
    for _ in 0..samples {
        let l = log_uniform(&mut rng, 1e-5, 1e-2);
        let r_cpu = log_uniform(&mut rng, 1e8, 1e11);
        let r_acc = r_cpu * log_uniform(&mut rng, 10.0, 1e4);
        let b_bw = log_uniform(&mut rng, 1e9, 1e12);
        let p = CostModelParams::new(l, r_acc, r_cpu, b_bw).unwrap();
        let d = derive_thresholds(&p, Relaxation::Exact);
        // Sample around the bounds, two decades either side.
        let f = d.exact_min_flops * log_uniform(&mut rng, 1e-2, 1e2);
        let ratio = d.exact_max_bytes_per_mac * log_uniform(&mut rng, 1e-2, 1e2);
        let s = RegionStats::new(3, f, (f * ratio) as u64);
        let ratio_ok = s.bytes_per_mac < d.exact_max_bytes_per_mac;
        let (off, cpu) = (offload_time(&s, &p), cpu_time(&s, &p));
        if f > d.exact_min_flops && ratio_ok {
            checked += 1;
            if off >= cpu {
                violations += 1;
                let excess = f / d.exact_min_flops;
                if worst.map_or(true, |w| excess > w.0) {
                    worst = Some((excess, off, cpu));
                }
            }
        }
        if f > l * r_acc && ratio_ok {
            tight_checked += 1;
            if off >= cpu {
                tight_violations += 1;
            }
        }
    }
    println!("INFO c02: with the stronger compute bound F > L*R_acc: {tight_violations} violations over {tight_checked} samples");
    let detail = match worst {
        Some((x, off, cpu)) => format!(
            "{violations} violations over {checked} qualifying samples ({samples} drawn); worst at F = {x:.4} x L*R_cpu (T_off={off:.3e}s, T_cpu={cpu:.3e}s)"
        ),
        None => format!("0 violations over {checked} qualifying samples ({samples} drawn)"),
    };
    (checked >= 10_000 / 4 && violations == 0, detail)
}

fn check_structure(g: &Graph, s: &PlanStructure) -> Result<(), String> {
    let n = g.node_count();
    let mut seen = vec![0usize; n];
    for b in &s.branches {
        for v in &b.nodes {
            seen[v.0] += 1;
        }
    }
    if let Some(v) = seen.iter().position(|&c| c != 1) {
        return Err(format!("node {v} appears in {} branches", seen[v]));
    }
    let reach = reachability(g);
    let layer_of = s.layer_of();
    for l in &s.layers {
        for (i, &a) in l.branches.iter().enumerate() {
            for &b in &l.branches[i + 1..] {
                for x in &s.branches[a].nodes {
                    for y in &s.branches[b].nodes {
                        if reach[x.0][y.0] || reach[y.0][x.0] {
                            return Err(format!(
                                "layer {} branches {a},{b} are dependent",
                                l.index
                            ));
                        }
                    }
                }
            }
        }
    }
    // Position of each branch in the flattened order; every cross-branch edge must go forward.
    let mut pos = vec![0usize; s.branches.len()];
    let mut k = 0;
    for l in &s.layers {
        for &b in &l.branches {
            pos[b] = k;
            k += 1;
        }
    }
    if k != s.branches.len() {
        return Err("layers do not cover every branch".into());
    }
    let owner = parallax_core::structure::branch_index(n, &s.branches);
    for (i, node) in g.nodes().iter().enumerate() {
        for &t in &node.outputs {
            for c in &g.tensor(t).consumers {
                let (a, b) = (owner[i], owner[c.0]);
                if a != b && (pos[a] >= pos[b] || layer_of[a] >= layer_of[b]) {
                    return Err(format!(
                        "edge {i}->{} runs backwards between branches {a},{b}",
                        c.0
                    ));
                }
            }
        }
    }
    Ok(())
}

fn c03_branch_layer_correctness() -> Outcome {
    let cfg = default_config();
    let mut graphs = 0;
    let mut failures = Vec::new();
    for seed in 0..500u64 {
        let g = random_graph(seed, 200);
        let pruned =
            prune_and_collapse(&g, &enumerate_candidates(&g), &cfg.thresholds, &cfg.flops).unwrap();
        for h in [&g, &pruned.graph] {
            let s = structure_of(h, &cfg).unwrap();
            if let Err(e) = check_structure(h, &s) {
                failures.push(format!("seed {seed}: {e}"));
            }
            graphs += 1;
        }
    }
    (
        failures.is_empty(),
        format!(
            "{graphs} decompositions over 500 random DAGs, {} violations{}",
            failures.len(),
            first(failures.first())
        ),
    )
}

fn time_decomposition(g: &Graph, reps: usize) -> Duration {
    let cfg = default_config();
    let mut best = Duration::MAX;
    for _ in 0..reps {
        let t0 = Instant::now();
        let flops = graph_flops(g, &cfg.flops).unwrap();
        let s = PlanStructure::build(g, &flops, &cfg.refine).unwrap();
        std::hint::black_box(&s);
        best = best.min(t0.elapsed());
    }
    best
}

fn time_delegation(g: &Graph) -> Duration {
    let cfg = default_config();
    let t0 = Instant::now();
    let p = prune_and_collapse(g, &enumerate_candidates(g), &cfg.thresholds, &cfg.flops).unwrap();
    std::hint::black_box(&p);
    t0.elapsed()
}

fn loglog_slope(points: &[(f64, Duration)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.as_secs_f64().ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    xs.iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>()
}

fn c04_linear_time_scaling() -> Outcome {
    let sizes = [1_000usize, 10_000, 100_000];
    let mut points = Vec::new();
    let mut delegation = Vec::new();
    for &n in &sizes {
        let mut rc = RandomDagConfig::new(n);
        rc.control_flow_prob = 0.01;
        let g =
            parallax_core::pipeline::prepare(&Graph::from_doc(&synth::random_dag(&rc, 4)).unwrap())
                .unwrap();
        let reps = if n >= 100_000 { 3 } else { 7 };
        points.push((n as f64, time_decomposition(&g, reps)));
        delegation.push((n as f64, time_delegation(&g)));
    }
    println!(
        "INFO c04: delegate partitioning slope {:.3}, {:?} at 1e5 nodes",
        loglog_slope(&delegation),
        delegation.last().unwrap().1
    );
    let slope = loglog_slope(&points);
    let largest = points.last().unwrap().1;
    let timings: Vec<String> = points
        .iter()
        .map(|(n, d)| format!("{n:.0}: {d:?}"))
        .collect();
    (
        slope <= 1.15 && largest < Duration::from_secs(2),
        format!("log-log slope {slope:.3}; {}", timings.join(", ")),
    )
}

fn random_liveness(rng: &mut ChaCha8Rng) -> Liveness {
    let count = rng.gen_range(1..=1000);
    let steps = rng.gen_range(1..=count.max(2));
    let intervals = (0..count)
        .map(|i| {
            let def = rng.gen_range(0..steps);
            let last = if rng.gen_bool(0.1) {
                steps - 1
            } else {
                rng.gen_range(def..steps.min(def + 20))
            };
            LivenessInterval {
                tensor: TensorId(i),
                def_step: def,
                last_use_step: last,
                size_bytes: rng.gen_range(1..=1 << 16),
            }
        })
        .collect();
    Liveness {
        intervals,
        steps,
        warnings: Vec::new(),
    }
}

fn c05_peak_memory_oracle() -> Outcome {
    let cfg = default_config();
    let mut branches = 0;
    let mut mismatches = Vec::new();
    for name in fixture_names() {
        let p = plan(&synth::fixture(name).unwrap(), &cfg).unwrap();
        for b in &p.structure.branches {
            let live = compute_liveness(&p.partitioned.graph, &b.nodes).unwrap();
            let got = estimate_peak(b.id, &live).peak_bytes;
            let want = brute_force_peak(&live);
            if got != want {
                mismatches.push(format!("{name} branch {}: {got} vs {want}", b.id));
            }
            branches += 1;
        }
    }
    let fixture_branches = branches;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let live = random_liveness(&mut rng);
        let got = estimate_peak(i, &live).peak_bytes;
        let want = brute_force_peak(&live);
        if got != want {
            mismatches.push(format!("random branch {i}: {got} vs {want}"));
        }
        branches += 1;
    }
    (
        mismatches.is_empty(),
        format!(
            "{branches} branches ({fixture_branches} from fixtures), {} mismatches{}",
            mismatches.len(),
            first(mismatches.first())
        ),
    )
}

/// Pairwise check: tensors sharing a buffer never overlap in lifetime, and
/// buffers never overlap in address space.
fn overlap_violations(p: &ArenaPlan) -> usize {
    let mut bad = 0;
    let entries: Vec<(&TensorId, &usize)> = p.assignment.iter().collect();
    for (i, (a, ba)) in entries.iter().enumerate() {
        for (b, bb) in &entries[i + 1..] {
            if ba == bb && p.interval(**a).unwrap().overlaps(p.interval(**b).unwrap()) {
                bad += 1;
            }
        }
    }
    for (i, x) in p.buffers.iter().enumerate() {
        for y in &p.buffers[i + 1..] {
            if x.offset < y.offset + y.capacity && y.offset < x.offset + x.capacity {
                bad += 1;
            }
        }
        if x.offset + x.capacity > p.arena_size_bytes {
            bad += 1;
        }
    }
    for iv in &p.intervals {
        let buf = &p.buffers[p.assignment[&iv.tensor]];
        if buf.capacity < iv.size_bytes {
            bad += 1;
        }
    }
    bad
}

fn c06_sharing_safety() -> Outcome {
    let cfg = default_config();
    let mut plans = 0;
    let mut violations = 0;
    let mut seed = 0u64;
    while plans < 1000 {
        let g = random_graph(seed, 200);
        let p = plan(&g, &cfg).unwrap();
        for a in &p.arenas {
            violations += overlap_violations(a);
            plans += 1;
        }
        seed += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let live = random_liveness(&mut rng);
        let align = [1, 8, 64][i % 3];
        let a = plan_arena(i, &live, &PlanConfig { alignment: align });
        violations += overlap_violations(&a);
        plans += 1;
    }
    (violations == 0,
        format!("{plans} plans ({seed} fuzzed graphs plus synthetic liveness sets), {violations} overlapping shares"),
    )
}

fn c07_arena_reduction() -> Outcome {
    let cfg = default_config();
    let chain = plan(&synth::fixture("chain50").unwrap(), &cfg).unwrap();
    let ratio = chain.comparison.planned_bytes as f64 / chain.comparison.naive_bytes as f64;
    let mut worse = Vec::new();
    let mut lines = Vec::new();
    for name in fixture_names() {
        let p = plan(&synth::fixture(name).unwrap(), &cfg).unwrap();
        for a in &p.arenas {
            if a.arena_size_bytes > a.naive_bytes() {
                worse.push(format!("{name} branch {}", a.branch));
            }
        }
        lines.push(format!("{name} {:.1}%", p.comparison.reduction_pct));
    }
    (
        ratio <= 0.5 && worse.is_empty(),
        format!(
            "chain50 planned/naive = {}/{} ({:.1}%); {} branches above naive; reductions: {}",
            chain.comparison.planned_bytes,
            chain.comparison.naive_bytes,
            100.0 * ratio,
            worse.len(),
            lines.join(", ")
        ),
    )
}

fn c08_greedy_budget_scheduling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = Vec::new();
    let trials = 2000;
    for trial in 0..trials {
        let n = rng.gen_range(1..=12);
        let hi: u64 = if rng.gen_bool(0.5) { 1 << 20 } else { 1000 };
        let members: Vec<(usize, u64)> =
            (0..n).map(|i| (i * 3 + 1, rng.gen_range(0..=hi))).collect();
        let budget = rng.gen_range(0..=hi * n as u64 / 2);
        let max_threads = rng.gen_range(1..=8);
        let (par, seq) = select_parallel_set(&members, budget, max_threads);
        let peak = |id: usize| members.iter().find(|m| m.0 == id).unwrap().1;
        let total: u64 = par.iter().map(|&b| peak(b)).sum();
        let peaks: Vec<u64> = members.iter().map(|m| m.1).collect();
        let best = max_feasible_subset(&peaks, budget, max_threads);
        let mut all: Vec<usize> = par.iter().chain(&seq).copied().collect();
        all.sort_unstable();
        let ids: Vec<usize> = members.iter().map(|m| m.0).collect();
        if total > budget || par.len() > max_threads || par.len() != best || all != ids {
            violations.push(format!(
                "trial {trial}: |par|={} best={best} sum={total} budget={budget}",
                par.len()
            ));
        }
    }
    // Schedules built by the pipeline respect the same constraints.
    let cfg = default_config();
    let mut schedules = 0;
    for name in fixture_names() {
        let p = plan(&synth::fixture(name).unwrap(), &cfg).unwrap();
        let peaks = p.peaks();
        for l in &p.schedule.layers {
            let total: u64 = l.parallel.iter().map(|&b| peaks[b]).sum();
            if total > p.schedule.budget.budget_bytes || l.parallel.len() > p.schedule.max_threads {
                violations.push(format!("{name} layer {}", l.index));
            }
        }
        schedules += 1;
    }
    (
        violations.is_empty(),
        format!(
            "{trials} random layers plus {schedules} fixture schedules, {} violations{}",
            violations.len(),
            first(violations.first())
        ),
    )
}

fn c09_thread_sweep_trend() -> Outcome {
    let g = synth::fixture("multi_branch").unwrap();
    let mut zero = default_config();
    zero.sim.spawn_overhead_s = 0.0;
    zero.refine.max_threads = 8;
    let p = plan(&g, &zero).unwrap();
    let flat: Vec<f64> = run_sweep(&p, 8, &zero)
        .unwrap()
        .iter()
        .map(|s| s.latency_s)
        .collect();
    let monotone = flat.windows(2).all(|w| w[1] <= w[0]);

    let mut dflt = default_config();
    dflt.refine.max_threads = 8;
    let p = plan(&g, &dflt).unwrap();
    let with: Vec<f64> = run_sweep(&p, 8, &dflt)
        .unwrap()
        .iter()
        .map(|s| s.latency_s)
        .collect();
    let gains: Vec<f64> = with.windows(2).map(|w| w[0] - w[1]).collect();
    let steepest = gains
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i + 1)
        .unwrap();
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{:.3}", x * 1e3))
            .collect::<Vec<_>>()
            .join(" ")
    };
    (monotone && steepest < 4,
        format!(
            "zero overhead ms [{}] non-increasing={monotone}; default overhead ms [{}], steepest step {steepest}->{}",
            fmt(&flat),
            fmt(&with),
            steepest + 1
        ),
    )
}

fn c10_structure_compaction() -> Outcome {
    let r = analyze(
        &synth::fixture("fragmented_transformer").unwrap(),
        &default_config(),
    )
    .unwrap();
    (
        r.parallax.layers < r.post.layers && r.parallax.parallel_layers >= r.post.parallel_layers,
        format!(
            "pre {:?}; post {:?}; parallax {:?}; {}/{} regions delegated",
            (r.pre.nodes, r.pre.layers, r.pre.parallel_layers),
            (r.post.nodes, r.post.layers, r.post.parallel_layers),
            (
                r.parallax.nodes,
                r.parallax.layers,
                r.parallax.parallel_layers
            ),
            r.accepted,
            r.candidates
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("c01 threshold derivation", c01_threshold_derivation),
        ("c02 cost-model consistency", c02_cost_model_consistency),
        ("c03 branch/layer correctness", c03_branch_layer_correctness),
        ("c04 linear-time scaling", c04_linear_time_scaling),
        ("c05 peak-memory oracle", c05_peak_memory_oracle),
        ("c06 buffer-sharing safety", c06_sharing_safety),
        ("c07 arena reduction", c07_arena_reduction),
        ("c08 greedy budget scheduling", c08_greedy_budget_scheduling),
        ("c09 thread-sweep trend", c09_thread_sweep_trend),
        ("c10 structure compaction", c10_structure_compaction),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let (ok, detail) = match std::panic::catch_unwind(f) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
