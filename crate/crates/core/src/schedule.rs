//! Memory-budgeted layer scheduling and a discrete-event latency simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{cpu_time, offload_time, CostModelParams, RegionStats};
use crate::graph::Graph;
use crate::memplan::ArenaPlan;
use crate::structure::{Branch, PlanStructure};

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("free memory must be positive")]
    NoMemory,
    #[error("safety margin {0} outside [0, 1)")]
    Margin(f64),
    #[error("thread count must be >= 1")]
    Threads,
}

/// How the safety margin turns free memory into a budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Hold back `margin` of free memory: `free * (1 - margin)`.
    #[default]
    Reserve,
    /// Use `margin` of free memory as the budget: `free * margin`.
    Fraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Budget {
    pub free_memory_bytes: u64,
    pub safety_margin: f64,
    pub mode: MarginMode,
    pub budget_bytes: u64,
}

pub const RECOMMENDED_MARGIN: (f64, f64) = (0.30, 0.50);

pub fn compute_budget(
    free_bytes: u64,
    margin: f64,
    mode: MarginMode,
) -> Result<Budget, ScheduleError> {
    if free_bytes == 0 {
        return Err(ScheduleError::NoMemory);
    }
    if !(0.0..1.0).contains(&margin) {
        return Err(ScheduleError::Margin(margin));
    }
    if !(RECOMMENDED_MARGIN.0..=RECOMMENDED_MARGIN.1).contains(&margin) {
        log::warn!("safety margin {margin} outside the recommended 0.30-0.50 range");
    }
    let keep = match mode {
        MarginMode::Reserve => 1.0 - margin,
        MarginMode::Fraction => margin,
    };
    Ok(Budget {
        free_memory_bytes: free_bytes,
        safety_margin: margin,
        mode,
        budget_bytes: (free_bytes as f64 * keep).floor() as u64,
    })
}

/// Ascending-M prefix under the budget and thread cap. `members` pairs a
/// branch id with its peak; both returned lists are in ascending id order.
pub fn select_parallel_set(
    members: &[(usize, u64)],
    budget: u64,
    max_threads: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut order = members.to_vec();
    order.sort_by_key(|&(id, m)| (m, id));
    let mut parallel = Vec::new();
    let mut used: u64 = 0;
    for &(id, m) in &order {
        if parallel.len() == max_threads {
            break;
        }
        match used.checked_add(m) {
            Some(total) if total <= budget => {
                used = total;
                parallel.push(id);
            }
            _ => break,
        }
    }
    let mut sequential: Vec<usize> = order
        .iter()
        .map(|&(id, _)| id)
        .filter(|id| !parallel.contains(id))
        .collect();
    parallel.sort_unstable();
    sequential.sort_unstable();
    (parallel, sequential)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSchedule {
    pub index: usize,
    pub parallel: Vec<usize>,
    pub sequential: Vec<usize>,
    /// Largest of the parallel set's summed peaks and any sequential peak.
    pub peak_residency_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub budget: Budget,
    pub max_threads: usize,
    pub layers: Vec<LayerSchedule>,
}

/// Greedy per-layer selection. Ineligible layers, and layers where only one
/// branch fits, run fully sequentially.
pub fn build_schedule(
    s: &PlanStructure,
    peaks: &[u64],
    budget: Budget,
    max_threads: usize,
) -> Result<Schedule, ScheduleError> {
    if max_threads == 0 {
        return Err(ScheduleError::Threads);
    }
    let layers = s
        .layers
        .iter()
        .map(|l| {
            let (mut parallel, mut sequential) = if l.parallel_eligible {
                let members: Vec<(usize, u64)> =
                    l.branches.iter().map(|&b| (b, peaks[b])).collect();
                select_parallel_set(&members, budget.budget_bytes, max_threads)
            } else {
                (Vec::new(), l.branches.clone())
            };
            if parallel.len() == 1 {
                sequential.append(&mut parallel);
                sequential.sort_unstable();
            }
            let together: u64 = parallel.iter().map(|&b| peaks[b]).sum();
            let alone = sequential.iter().map(|&b| peaks[b]).max().unwrap_or(0);
            LayerSchedule {
                index: l.index,
                parallel,
                sequential,
                peak_residency_bytes: together.max(alone),
            }
        })
        .collect();
    Ok(Schedule {
        budget,
        max_threads,
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    /// Charged once per branch launched on a worker thread.
    pub spawn_overhead_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            spawn_overhead_s: 50e-6,
        }
    }
}

/// Delegate stats recorded on a collapsed node's attributes.
pub fn delegate_stats(g: &Graph, n: crate::graph::NodeId) -> RegionStats {
    let node = g.node(n);
    let members = node
        .attrs
        .get("members")
        .and_then(|m| m.as_array())
        .map_or(1, Vec::len);
    RegionStats::new(
        members,
        node.attr_f64("macs").unwrap_or(0.0),
        node.attr_u64("boundary_bytes").unwrap_or(0),
    )
}

/// Seconds to run one branch: CPU nodes at `F / R_cpu`, delegates at the offload cost.
pub fn branch_time(g: &Graph, b: &Branch, flops: &[f64], p: &CostModelParams) -> f64 {
    b.nodes
        .iter()
        .map(|&n| {
            if g.node(n).is_delegate() {
                offload_time(&delegate_stats(g, n), p)
            } else {
                cpu_time(&RegionStats::new(1, flops[n.0], 0), p)
            }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEvent {
    Start {
        time: f64,
        layer: usize,
        branch: usize,
        worker: usize,
    },
    End {
        time: f64,
        layer: usize,
        branch: usize,
        worker: usize,
    },
    Barrier {
        time: f64,
        layer: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTiming {
    pub index: usize,
    pub start: f64,
    pub latency: f64,
    pub parallel: Vec<usize>,
    pub sequential: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidencySample {
    pub time: f64,
    pub bytes: u64,
    pub running: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub threads: usize,
    pub layers: Vec<LayerTiming>,
    pub end_to_end_s: f64,
    pub all_sequential_s: f64,
    pub peak_residency_bytes: u64,
    pub residency: Vec<ResidencySample>,
    pub events: Vec<SimEvent>,
    /// Instants where concurrently running branches exceeded the budget.
    pub budget_violations: Vec<ResidencySample>,
}

struct Run {
    branch: usize,
    worker: usize,
    start: f64,
    end: f64,
}

/// Replays the schedule layer by layer with strict barriers.
pub fn simulate(
    schedule: &Schedule,
    branch_times: &[f64],
    peaks: &[u64],
    threads: usize,
    cfg: &SimConfig,
) -> Result<SimReport, ScheduleError> {
    if threads == 0 {
        return Err(ScheduleError::Threads);
    }
    let mut events = Vec::new();
    let mut residency = Vec::new();
    let mut violations = Vec::new();
    let mut layers = Vec::with_capacity(schedule.layers.len());
    let mut clock = 0.0;
    let mut peak_residency = 0;
    for l in &schedule.layers {
        let start = clock;
        let workers = threads.min(l.parallel.len());
        let (par, seq) = if workers >= 2 {
            (l.parallel.clone(), l.sequential.clone())
        } else {
            let mut all: Vec<usize> = l.parallel.iter().chain(&l.sequential).copied().collect();
            all.sort_unstable();
            (Vec::new(), all)
        };
        let mut runs = Vec::new();
        let mut t = start;
        if !par.is_empty() {
            let mut free_at: Vec<f64> = vec![start; workers];
            for &b in &par {
                let (w, &at) = free_at
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
                    .expect("at least two workers");
                let end = at + cfg.spawn_overhead_s + branch_times[b];
                free_at[w] = end;
                runs.push(Run {
                    branch: b,
                    worker: w,
                    start: at,
                    end,
                });
            }
            t = free_at.iter().copied().fold(start, f64::max);
        }
        for &b in &seq {
            let end = t + branch_times[b];
            runs.push(Run {
                branch: b,
                worker: 0,
                start: t,
                end,
            });
            t = end;
        }

        // Residency at every start instant, counting runs alive then.
        let mut starts: Vec<f64> = runs.iter().map(|r| r.start).collect();
        starts.sort_by(f64::total_cmp);
        starts.dedup();
        for &at in &starts {
            let alive: Vec<&Run> = runs
                .iter()
                .filter(|r| r.start <= at && (at < r.end || r.start == r.end && r.start == at))
                .collect();
            let bytes = alive.iter().map(|r| peaks[r.branch]).sum();
            let sample = ResidencySample {
                time: at,
                bytes,
                running: alive.len(),
            };
            peak_residency = peak_residency.max(bytes);
            if sample.running >= 2 && bytes > schedule.budget.budget_bytes {
                violations.push(sample);
            }
            residency.push(sample);
        }

        let mut layer_events: Vec<SimEvent> = Vec::with_capacity(runs.len() * 2);
        for r in &runs {
            layer_events.push(SimEvent::Start {
                time: r.start,
                layer: l.index,
                branch: r.branch,
                worker: r.worker,
            });
            layer_events.push(SimEvent::End {
                time: r.end,
                layer: l.index,
                branch: r.branch,
                worker: r.worker,
            });
        }
        layer_events.sort_by(|a, b| {
            event_key(a)
                .partial_cmp(&event_key(b))
                .expect("finite times")
        });
        events.extend(layer_events);
        events.push(SimEvent::Barrier {
            time: t,
            layer: l.index,
        });

        layers.push(LayerTiming {
            index: l.index,
            start,
            latency: t - start,
            parallel: par,
            sequential: seq,
        });
        clock = t;
    }
    let all_sequential_s = schedule
        .layers
        .iter()
        .flat_map(|l| l.parallel.iter().chain(&l.sequential))
        .map(|&b| branch_times[b])
        .sum();
    Ok(SimReport {
        threads,
        end_to_end_s: layers.iter().map(|l| l.latency).sum(),
        all_sequential_s,
        peak_residency_bytes: peak_residency,
        layers,
        residency,
        events,
        budget_violations: violations,
    })
}

fn event_key(e: &SimEvent) -> (f64, u8, usize) {
    match *e {
        SimEvent::End { time, branch, .. } => (time, 0, branch),
        SimEvent::Start { time, branch, .. } => (time, 1, branch),
        SimEvent::Barrier { time, layer } => (time, 2, layer),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threads: usize,
    pub latency_s: f64,
}

/// Re-schedules and simulates with `max_threads = t` for `t = 1..=max`.
pub fn thread_sweep(
    s: &PlanStructure,
    peaks: &[u64],
    branch_times: &[f64],
    budget: Budget,
    max: usize,
    cfg: &SimConfig,
) -> Result<Vec<SweepPoint>, ScheduleError> {
    (1..=max)
        .map(|t| {
            let sched = build_schedule(s, peaks, budget, t)?;
            let r = simulate(&sched, branch_times, peaks, t, cfg)?;
            Ok(SweepPoint {
                threads: t,
                latency_s: r.end_to_end_s,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NaiveComparison {
    pub naive_bytes: u64,
    pub planned_bytes: u64,
    pub reduction_pct: f64,
}

pub fn compare_naive(plans: &[ArenaPlan]) -> NaiveComparison {
    let naive_bytes: u64 = plans.iter().map(ArenaPlan::naive_bytes).sum();
    let planned_bytes: u64 = plans.iter().map(|p| p.arena_size_bytes).sum();
    let reduction_pct = if naive_bytes == 0 {
        0.0
    } else {
        100.0 * (naive_bytes - planned_bytes) as f64 / naive_bytes as f64
    };
    NaiveComparison {
        naive_bytes,
        planned_bytes,
        reduction_pct,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1_000_000;

    #[test]
    fn budget_examples() {
        let b = compute_budget(1000 * MB, 0.40, MarginMode::Reserve).unwrap();
        assert_eq!(b.budget_bytes, 600 * MB);
        assert_eq!(
            compute_budget(1000, 0.0, MarginMode::Reserve)
                .unwrap()
                .budget_bytes,
            1000
        );
        assert_eq!(
            compute_budget(1000, 0.5, MarginMode::Reserve)
                .unwrap()
                .budget_bytes,
            500
        );
        assert_eq!(
            compute_budget(1000, 0.4, MarginMode::Fraction)
                .unwrap()
                .budget_bytes,
            400
        );
        assert_eq!(
            compute_budget(1000, 1.0, MarginMode::Reserve),
            Err(ScheduleError::Margin(1.0))
        );
        assert_eq!(
            compute_budget(0, 0.4, MarginMode::Reserve),
            Err(ScheduleError::NoMemory)
        );
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(
            select_parallel_set(&[(0, 50), (1, 30), (2, 20)], 60, 6),
            (vec![1, 2], vec![0])
        );
        assert_eq!(
            select_parallel_set(&[(0, 50), (1, 70)], 10, 6),
            (vec![], vec![0, 1])
        );
        let eight: Vec<(usize, u64)> = (0..8).map(|i| (i, 1)).collect();
        let (p, s) = select_parallel_set(&eight, 100, 6);
        assert_eq!(p.len(), 6);
        assert_eq!(s, vec![6, 7]);
    }

    fn one_layer(parallel: Vec<usize>, sequential: Vec<usize>) -> Schedule {
        Schedule {
            budget: compute_budget(1 << 30, 0.4, MarginMode::Reserve).unwrap(),
            max_threads: 6,
            layers: vec![LayerSchedule {
                index: 0,
                parallel,
                sequential,
                peak_residency_bytes: 0,
            }],
        }
    }

    #[test]
    fn two_parallel_branches_overlap() {
        let cfg = SimConfig::default();
        let r = simulate(
            &one_layer(vec![0, 1], vec![]),
            &[0.010, 0.010],
            &[1, 1],
            2,
            &cfg,
        )
        .unwrap();
        assert!((r.end_to_end_s - (0.010 + cfg.spawn_overhead_s)).abs() < 1e-12);
        assert!((r.all_sequential_s - 0.020).abs() < 1e-12);
        let r = simulate(
            &one_layer(vec![0, 1], vec![]),
            &[0.010, 0.010],
            &[1, 1],
            1,
            &cfg,
        )
        .unwrap();
        assert!((r.end_to_end_s - 0.020).abs() < 1e-12);
    }

    #[test]
    fn single_branch_has_no_overhead() {
        let r = simulate(
            &one_layer(vec![], vec![0]),
            &[0.003],
            &[1],
            4,
            &SimConfig::default(),
        )
        .unwrap();
        assert_eq!(r.end_to_end_s, 0.003);
    }

    #[test]
    fn queued_branches_take_earliest_worker() {
        let cfg = SimConfig {
            spawn_overhead_s: 0.0,
        };
        let r = simulate(
            &one_layer(vec![0, 1, 2], vec![]),
            &[3.0, 1.0, 1.0],
            &[1, 1, 1],
            2,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.end_to_end_s, 3.0);
        assert_eq!(r.peak_residency_bytes, 2);
    }

    #[test]
    fn naive_comparison_handles_empty() {
        let c = compare_naive(&[]);
        assert_eq!(c.reduction_pct, 0.0);
    }
}
