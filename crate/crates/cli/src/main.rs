//! `parallax`: analyze, plan and simulate branch-parallel execution of a graph.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use parallax_core::cost::DeviceProfile;
use parallax_core::graph::{parse_graph, Graph};
use parallax_core::pipeline::{self, PipelineConfig};
use parallax_core::schedule::MarginMode;
use parallax_core::ErrorKind;
use thiserror::Error;

mod report;

#[derive(Parser)]
#[command(
    name = "parallax",
    version,
    about = "Offline branch-parallel planner for DNN graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Structure counts before delegation, with every candidate delegated, and after pruning.
    Analyze(RunArgs),
    /// Full plan: delegates, branches, layers, arenas, peaks and schedule.
    Plan(RunArgs),
    /// Plan, then replay the schedule in the latency simulator.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Also simulate every thread count from 1 to --threads.
        #[arg(long)]
        sweep: bool,
        /// Write the sweep as CSV (implies --sweep).
        #[arg(long, value_name = "PATH")]
        sweep_csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Graph JSON file.
    #[arg(long, value_name = "PATH")]
    graph: PathBuf,
    /// Device profile JSON (L_sec, R_acc, R_cpu, B_bw, optional threshold overrides).
    #[arg(long, value_name = "PATH")]
    profile: Option<PathBuf>,
    /// Balance ratio limit F_max/F_min for parallel layers.
    #[arg(long)]
    beta: Option<f64>,
    /// Safety margin applied to free memory.
    #[arg(long, default_value_t = 0.4)]
    margin: f64,
    #[arg(long, value_enum, default_value_t = MarginArg::Reserve)]
    margin_mode: MarginArg,
    /// Free memory snapshot in bytes.
    #[arg(long, default_value_t = 4 << 30)]
    free_mem_bytes: u64,
    /// Thread cap for scheduling and simulation.
    #[arg(long, default_value_t = 6)]
    threads: usize,
    /// Branches need strictly more nodes than this to run in parallel.
    #[arg(long)]
    min_branch_nodes: Option<usize>,
    /// Per-branch spawn overhead for parallel execution, in microseconds.
    #[arg(long)]
    spawn_overhead_us: Option<f64>,
    /// Charge Misc ops half their output size instead of zero.
    #[arg(long)]
    misc_half_cost: bool,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    emit: Emit,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MarginArg {
    /// budget = free * (1 - margin)
    Reserve,
    /// budget = free * margin
    Fraction,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    Json,
    Text,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("device profile {}: {source}", path.display())]
    Profile {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] parallax_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 2,
            CliError::Profile { .. } | CliError::Config(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Invalid => 1,
                ErrorKind::Internal => 3,
            },
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn config(a: &RunArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &a.profile {
        let prof: DeviceProfile =
            serde_json::from_slice(&read(path)?).map_err(|source| CliError::Profile {
                path: path.clone(),
                source,
            })?;
        cfg.params = prof.params().map_err(parallax_core::Error::from)?;
        cfg.thresholds = prof
            .apply_overrides(cfg.thresholds)
            .map_err(parallax_core::Error::from)?;
    }
    if let Some(b) = a.beta {
        cfg.refine.beta = b;
    }
    if let Some(n) = a.min_branch_nodes {
        cfg.refine.min_branch_nodes = n;
    }
    cfg.refine.max_threads = a.threads;
    cfg.refine
        .check()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(us) = a.spawn_overhead_us {
        if !(us >= 0.0 && us.is_finite()) {
            return Err(CliError::Config(format!(
                "spawn overhead must be a non-negative number of microseconds, got {us}"
            )));
        }
        cfg.sim.spawn_overhead_s = us * 1e-6;
    }
    cfg.flops.misc_half_cost = a.misc_half_cost;
    cfg.free_memory_bytes = a.free_mem_bytes;
    cfg.margin = a.margin;
    cfg.margin_mode = match a.margin_mode {
        MarginArg::Reserve => MarginMode::Reserve,
        MarginArg::Fraction => MarginMode::Fraction,
    };
    cfg.budget()?;
    Ok(cfg)
}

fn load(a: &RunArgs) -> Result<Graph, CliError> {
    Ok(parse_graph(&read(&a.graph)?).map_err(parallax_core::Error::from)?)
}

fn emit(
    a: &RunArgs,
    json: serde_json::Value,
    text: impl FnOnce() -> String,
) -> Result<(), CliError> {
    let mut body = match a.emit {
        Emit::Json => serde_json::to_string_pretty(&json).expect("reports serialize"),
        Emit::Text => text(),
    };
    if !body.ends_with('\n') {
        body.push('\n');
    }
    match &a.out {
        Some(path) => write(path, &body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(a) => {
            let cfg = config(&a)?;
            let g = load(&a)?;
            let r = pipeline::analyze(&g, &cfg)?;
            emit(&a, report::analyze_json(&a.graph, &r), || {
                report::analyze_text(&r)
            })
        }
        Command::Plan(a) => {
            let cfg = config(&a)?;
            let g = load(&a)?;
            let p = pipeline::plan(&g, &cfg)?;
            emit(&a, report::plan_json(&a.graph, &cfg, &p), || {
                report::plan_text(&p)
            })
        }
        Command::Simulate {
            run: a,
            sweep,
            sweep_csv,
        } => {
            let cfg = config(&a)?;
            let g = load(&a)?;
            let p = pipeline::plan(&g, &cfg)?;
            let sim = pipeline::run_simulation(&p, a.threads, &cfg)?;
            let points = if sweep || sweep_csv.is_some() {
                Some(pipeline::run_sweep(&p, a.threads, &cfg)?)
            } else {
                None
            };
            if let (Some(path), Some(points)) = (&sweep_csv, &points) {
                write(path, &report::sweep_csv(points))?;
            }
            emit(
                &a,
                report::simulate_json(&a.graph, &cfg, &p, &sim, points.as_deref()),
                || report::simulate_text(&p, &sim, points.as_deref()),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("parallax: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
