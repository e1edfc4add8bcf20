//! Command-line front end for the simulator.
//!
//! Four subcommands cover the workflow: `run` executes a Monte Carlo
//! experiment from a JSON config and writes per-trial CSV traces, a
//! `summary.json`, and a plot script; `validate` performs every standing
//! assumption check without iterating; `oracle` solves the centralized
//! reference problem and prints the equilibrium (and, for coupled games,
//! the multiplier with its KKT residuals) as JSON; `rate` fits a geometric
//! decay rate to the error column of a previously written trace.
//!
//! Exit codes: 0 on success, 2 for configuration problems (including bad
//! flags and unreadable files), 3 when a standing assumption is violated,
//! 4 when every trial of a run fails to converge.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nashtrack::experiments::{
    gen_instance, run_monte_carlo, solve_reference, validate_only, ExperimentConfig,
    MonteCarloSummary,
};
use nashtrack::oracles::fit_qlinear_rate;
use nashtrack::trace::TraceFile;
use nashtrack::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nashtrack",
    version,
    about = "Distributed equilibrium seeking in aggregative games: \
             Monte Carlo runs, assumption checks, reference solves, rate fits"
)]
struct Cli {
    /// Suppress per-trial progress lines and detail output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured Monte Carlo experiment and write traces, a
    /// summary, and a plot script.
    Run(RunArgs),
    /// Check every standing assumption of the configured run without
    /// iterating.
    Validate(ConfigArgs),
    /// Solve the centralized reference problem for trial 0 and print the
    /// result as JSON.
    Oracle(ConfigArgs),
    /// Fit a geometric decay rate to the normalized error column of a
    /// trace CSV.
    Rate(RateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,

    /// Override the master seed from the config file.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the number of Monte Carlo trials.
    #[arg(long)]
    trials: Option<usize>,

    /// Override the worker thread count for the trial pool.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Output directory for trial CSVs, summary.json, and the plot script.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RateArgs {
    /// Trace CSV produced by `run`.
    csv: PathBuf,

    /// Rounds to skip before fitting; defaults to one fifth of the series.
    #[arg(long)]
    burn_in: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args, cli.quiet),
        Command::Validate(args) => cmd_validate(args, cli.quiet),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Rate(args) => cmd_rate(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration-class problems, 3 for violated standing assumptions,
/// 4 for runs that never settle.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Assumption(_) => 3,
        Error::Divergence { .. } | Error::DualSafeguard { .. } | Error::NoConvergence { .. } => 4,
        _ => 2,
    }
}

/// Load the config and apply command-line overrides, re-validating after.
fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    if let Some(threads) = args.threads {
        cfg.threads = Some(threads);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: &RunArgs, quiet: bool) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    let summary = run_monte_carlo(&cfg, &args.out)?;
    if !quiet {
        print_trials(&summary);
    }
    println!(
        "{}/{} trials completed ({} failed), case {} with algorithm {}",
        summary.completed, summary.trials, summary.failed, summary.case, summary.algorithm
    );
    if let Some(err) = summary.final_mean_normalized_err {
        println!("final mean normalized error: {err:.3e}");
    }
    if let Some(w) = &summary.wall_ns_per_iter {
        println!("median iterate time: {:.0} ns", w.median_ns);
    }
    println!("wrote {}", args.out.join("summary.json").display());
    if summary.completed == 0 {
        eprintln!("error: every trial failed");
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

fn print_trials(summary: &MonteCarloSummary) {
    for rec in &summary.trial_records {
        let err = rec
            .final_normalized_err
            .map(|e| format!("{e:.3e}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "trial {:03}: {} ({} iterations, final normalized error {err})",
            rec.trial, rec.outcome, rec.iterations
        );
        for w in &rec.warnings {
            println!("trial {:03}: warning: {w}", rec.trial);
        }
    }
}

fn cmd_validate(args: &ConfigArgs, quiet: bool) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let lines = validate_only(&cfg)?;
    if quiet {
        // Keep the verdict line; checks that fail never reach this point.
        if let Some(last) = lines.last() {
            println!("{last}");
        }
    } else {
        for line in &lines {
            println!("{line}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(args: &ConfigArgs) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    let (game, _net, _x0, _lambda0) = gen_instance(&cfg, 0)?;
    let (x_star, dual) = solve_reference(&cfg, &game)?;
    let x: Vec<Vec<f64>> = (0..game.n_agents())
        .map(|i| x_star.block(i).iter().copied().collect())
        .collect();
    let (lambda, kkt) = match dual {
        Some((l, k)) => (Some(l.iter().copied().collect::<Vec<f64>>()), Some(k)),
        None => (None, None),
    };
    let out = serde_json::json!({
        "case": cfg.case.label(),
        "algorithm": cfg.algorithm.label(),
        "trial": 0,
        "x": x,
        "x_norm": x_star.norm(),
        "lambda": lambda,
        "kkt": kkt,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_rate(args: &RateArgs) -> Result<ExitCode> {
    let trace = TraceFile::read(&args.csv)?;
    let series = trace.column("normalized_err")?;
    if series.iter().any(|v| v.is_nan()) {
        return Err(Error::Config(format!(
            "{} has empty normalized-error cells; it was written without a \
             reference oracle",
            args.csv.display()
        )));
    }
    let burn_in = args.burn_in.unwrap_or(series.len() / 5);
    let fit = fit_qlinear_rate(&series, burn_in)?;
    let out = serde_json::json!({
        "csv": display_path(&args.csv),
        "points": series.len(),
        "burn_in": burn_in,
        "fit": fit,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}
