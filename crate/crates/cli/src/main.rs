use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use quickive::checks::{self, Mutation, Scale};
use quickive::experiment::{resolve_config, run_experiment, write_outputs, ConfigOverrides, ExperimentKind, InitKind};

#[derive(Parser)]
#[command(name = "quickive", version, about = "Monte-Carlo benchmarks for blind extraction and separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV and JSON outputs.
    Run(RunArgs),
    /// Run the numerical self-checks and print one line per check.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with configuration fields; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<String>,
    /// Comma-separated method list.
    #[arg(long, value_delimiter = ',')]
    algorithm: Option<Vec<String>>,
    #[arg(long)]
    score: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    /// exact or approx
    #[arg(long)]
    hessian: Option<String>,
    /// near_ideal or random
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    n_b: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smaller sample sizes.
    #[arg(long)]
    quick: bool,
    /// Deliberately break the implementation to show the checks bite.
    #[arg(long, default_value = "none")]
    mutation: String,
}

fn overrides(args: RunArgs) -> anyhow::Result<(Option<PathBuf>, ConfigOverrides)> {
    let experiment = args.experiment.map(|s| s.parse::<ExperimentKind>()).transpose()?;
    let init = args.init.map(|s| s.parse::<InitKind>()).transpose()?;
    Ok((
        args.config,
        ConfigOverrides {
            experiment,
            algorithms: args.algorithm,
            score: args.score,
            k: args.k,
            d: args.d,
            t: args.t,
            n_b: args.n_b,
            trials: args.trials,
            seed: args.seed,
            init,
            tol: args.tol,
            max_iter: args.max_iter,
            iterations: args.iterations,
            hessian: args.hessian,
            mu: args.mu,
            workers: args.workers,
            out: args.out,
            ..ConfigOverrides::default()
        },
    ))
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let (file, flags) = overrides(args)?;
    let file = file.map(|p| ConfigOverrides::from_json_file(&p)).transpose()?;
    let cfg = resolve_config(file, flags)?;
    let result = run_experiment(&cfg)?;
    let written = write_outputs(&result, &cfg.out).with_context(|| format!("writing {}", cfg.out.display()))?;
    if let Some(report) = &result.selftest {
        println!("{report}");
        return Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE });
    }
    for s in &result.summary.algorithms {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<13} success {:>7} median_iter {:>8} ms/iter {:>8} final_isr {:>9} errors {}",
            s.algorithm,
            fmt(s.success_fraction),
            fmt(s.median_iterations),
            fmt(s.mean_wall_ms_per_iteration),
            fmt(s.final_isr_db_mean),
            s.errors
        );
    }
    for path in written {
        eprintln!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn selftest(args: SelftestArgs) -> anyhow::Result<ExitCode> {
    let mutation: Mutation = args.mutation.parse()?;
    let scale = if args.quick { Scale::Quick } else { Scale::Full };
    let report = checks::run_all(args.seed, mutation, scale);
    println!("{report}");
    Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Selftest(args) => selftest(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
