use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::info;

use adle::config::{parse_config, ScenarioConfig};
use adle::harness::run_experiment;
use adle::output::write_report;

const EXIT_CONFIG: u8 = 1;
const EXIT_ACCEPTANCE: u8 = 2;

/// Monte Carlo runner for adaptive distributed linear estimation.
#[derive(Parser, Debug)]
#[command(name = "adle", version, about)]
struct Args {
    /// Scenario file (TOML, schema "adle-scenario/1").
    #[arg(long)]
    config: PathBuf,

    /// Master seed; overrides the scenario's `run.master_seed`.
    #[arg(long)]
    seed: Option<u64>,

    /// Number of trials; overrides `run.num_trials`.
    #[arg(long)]
    trials: Option<u64>,

    /// Horizon in steps; overrides `run.horizon`.
    #[arg(long)]
    horizon: Option<u64>,

    /// Output directory. Falls back to $ADLE_OUT_DIR, then `output.dir`, then `adle-out`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Check the scenario, print its derived quantities and exit.
    #[arg(long)]
    validate_only: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    match run(args) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn run(args: Args) -> Result<ExitCode, String> {
    let mut cfg = parse_config(&args.config).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.file.run.master_seed = seed;
    }
    if let Some(t) = args.trials {
        cfg.file.run.num_trials = t;
    }
    if let Some(h) = args.horizon {
        cfg.file.run.horizon = h;
    }
    // Overrides can invalidate a scenario (e.g. zero trials).
    let cfg = ScenarioConfig::from_file(cfg.file).map_err(|e| e.to_string())?;
    let experiment = cfg.experiment::<f64>();

    if args.validate_only {
        let summary = experiment
            .validate()
            .map_err(|v| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))?;
        let l2 = experiment
            .topology
            .validate_mean_connectivity::<f64>()
            .map_err(|e| e.to_string())?;
        let check = experiment
            .schedule
            .validate(experiment.require_efficiency)
            .map_err(|e| e.to_string())?;
        println!("lambda2_mean_laplacian = {l2}");
        println!("schedule_slack = {}", check.slack);
        println!("consensus_weight_b = {}", experiment.schedule.b);
        println!("asymptotic_covariance (Sigma_c^-1) =");
        for i in 0..summary.asymptotic_cov.nrows() {
            let row: Vec<String> = summary
                .asymptotic_cov
                .row(i)
                .iter()
                .map(|v| format!("{v:>12.6}"))
                .collect();
            println!("  {}", row.join(" "));
        }
        return Ok(ExitCode::SUCCESS);
    }

    let out = args
        .out
        .or_else(|| std::env::var_os("ADLE_OUT_DIR").map(PathBuf::from))
        .or_else(|| cfg.file.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("adle-out"));

    info!(
        "running {} trials of {} steps (seed {})",
        experiment.num_trials, experiment.horizon, experiment.master_seed
    );
    let report = run_experiment(&experiment).map_err(|e| e.to_string())?;
    let written = write_report(&out, &report).map_err(|e| format!("{}: {e}", out.display()))?;
    for c in &report.checks {
        println!(
            "{} {:<30} value={:<12.6} threshold {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(if report.all_passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ACCEPTANCE)
    })
}
