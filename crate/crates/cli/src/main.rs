use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rspc_core::config::{Overrides, RunConfig};
use rspc_core::harness::{
    bench_qp, bias_benchmark, compare_runs, export_comparison, export_csv, run_metrics, run_pair, run_scenario,
    sweep_levels, write_sweep, BiasBenchmarkSettings,
};
use rspc_core::plant::{ProfileKind, ScenarioProfile};
use rspc_core::{Result, RspcError};

#[derive(Parser)]
#[command(name = "rspc", version, about = "Recursive subspace predictive control on a synthetic flap-controlled bluff body")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its time series and metrics.
    Run(RunArgs),
    /// Static yaw sweep, controlled and uncontrolled; writes per-level means.
    Sweep(RunArgs),
    /// Paired controlled/uncontrolled runs of the same scenario and seeds.
    Compare(RunArgs),
    /// Naive vs innovation-augmented predictor fits on closed-loop data.
    BenchEstimator(EstimatorArgs),
    /// Hildreth solves on seeded random problems.
    BenchQp(QpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// constant, sinusoid, steps or sweep (replaces the configured profile)
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_enum)]
    control: Option<Switch>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recorded seconds, excluding the warm-up.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct EstimatorArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QpArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    n_u: usize,
    #[arg(long, default_value_t = 40)]
    ell: usize,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

fn resolve(args: &RunArgs, default_kind: &str) -> Result<RunConfig> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(
            ScenarioProfile { kind: ProfileKind::default_for(default_kind)?, duration: 300.0 },
            true,
            1,
        ),
    };
    base.apply(&Overrides {
        scenario: args.scenario.clone(),
        control: args.control.map(|s| matches!(s, Switch::On)),
        seed: args.seed,
        duration: args.duration,
        out: args.out.clone(),
    })
}

fn out_dir(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.run.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args, "sinusoid")?;
    let record = run_scenario(&cfg)?;
    let metrics = run_metrics(&record)?;
    print_files(&export_csv(&record, &metrics, &out_dir(&cfg, "out"))?);
    println!(
        "tracking rms {:.4e} {:.4e} {:.4e}, cb sliding p2p {:.4e}",
        metrics.tracking_rms[0], metrics.tracking_rms[1], metrics.tracking_rms[2], metrics.cb_sliding_p2p
    );
    if let Some(f) = &record.fault {
        return Err(RspcError::PlantFault { step: record.rows.len(), reason: f.clone() });
    }
    Ok(())
}

fn cmd_compare(args: &RunArgs, default_kind: &str) -> Result<(RunConfig, PathBuf)> {
    let cfg = resolve(args, default_kind)?;
    let dir = out_dir(&cfg, "out");
    let (on, off) = run_pair(&cfg)?;
    let cmp = compare_runs(&on, &off)?;
    print_files(&export_comparison(&on, &off, &cmp, &dir)?);
    println!(
        "tracking ratio {:.3} {:.3} {:.3}, p2p ratio {:.3}, improvement {:.1}%",
        cmp.tracking_ratio[0], cmp.tracking_ratio[1], cmp.tracking_ratio[2], cmp.p2p_ratio, cmp.improvement_pct
    );
    for (name, r) in [("controlled", &on), ("uncontrolled", &off)] {
        if let Some(f) = &r.fault {
            return Err(RspcError::PlantFault { step: r.rows.len(), reason: format!("{name} run: {f}") });
        }
    }
    Ok((cfg, dir))
}

fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let (cfg, dir) = cmd_compare(args, "sweep")?;
    if cfg.run.scenario.kind.name() != "sweep" {
        return Ok(());
    }
    for side in ["on", "off"] {
        let rows = rspc_core::harness::read_timeseries(&dir.join(side).join("timeseries.csv"))?;
        let record = rspc_core::harness::RunRecord { config: cfg.clone(), rows, fault: None, engaged_at: None };
        let path = dir.join(format!("sweep_{side}.csv"));
        write_sweep(&sweep_levels(&record), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_bench_estimator(args: &EstimatorArgs) -> Result<()> {
    let settings = BiasBenchmarkSettings { samples: args.samples, ..Default::default() };
    let bench = bias_benchmark(args.seed..args.seed + args.seeds, &settings)?;
    let mut table = String::from("seed,naive_error,augmented_error,reference_norm\n");
    for (seed, r) in &bench.reports {
        table.push_str(&format!("{seed},{:e},{:e},{:e}\n", r.biased_error, r.unbiased_error, r.reference_norm));
    }
    print!("{table}");
    println!(
        "mean naive {:.4e}, mean augmented {:.4e}, ratio {:.3}",
        bench.mean_biased,
        bench.mean_unbiased,
        bench.ratio()
    );
    if let Some(dir) = &args.out {
        write_file(&dir.join("estimator_bench.csv"), &table)?;
    }
    Ok(())
}

fn cmd_bench_qp(args: &QpArgs) -> Result<()> {
    let b = bench_qp(args.count, args.seed, args.n_u, args.ell, args.max_iter, args.tol);
    println!(
        "{} problems in {:.3} s: {} unconverged, iterations mean {:.1} max {}, kkt stationarity {:.2e} feasibility {:.2e} complementarity {:.2e}",
        b.problems,
        b.seconds,
        b.unconverged,
        b.mean_iterations,
        b.max_iterations,
        b.max_stationarity,
        b.max_feasibility,
        b.max_complementarity
    );
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let io = |source| RspcError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, text).map_err(|source| RspcError::Io { path: path.to_path_buf(), source })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a, "sinusoid").map(|_| ()),
        Command::BenchEstimator(a) => cmd_bench_estimator(a),
        Command::BenchQp(a) => cmd_bench_qp(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
