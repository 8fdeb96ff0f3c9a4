//! `causalmix`: run experiment suites, compare query strategies, serve live
//! elicitation sessions and summarize reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use causalmix::bed::QueryStrategy;
use causalmix::experiment::{
    bootstrap_mean_ci, compare_strategies, run_experiment, write_comparison, write_outputs, ExperimentConfig,
    SuiteReport,
};
use causalmix::mixture::derived_rng;
use causalmix_service::AppState;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "causalmix", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only, replacing the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds run concurrently.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to the config's `output_dir`, then `results`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Bed,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Run a suite and write report.json, metrics.csv and progress.ndjson.
    Run(RunArgs),
    /// Run a suite once per query strategy on identical data and expert answers.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["bed", "random"])]
        strategies: Vec<Strategy>,
    },
    /// Serve live elicitation sessions over HTTP.
    ElicitServe {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Directory for session logs; existing logs are replayed at start.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize the report.json in a results directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Marks errors caused by the user's configuration.
#[derive(Debug)]
struct ConfigError;

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("configuration error")
    }
}

impl std::error::Error for ConfigError {}

fn load_config(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let load = || -> causalmix::Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            config.seeds = vec![seed];
        }
        if let Some(w) = args.workers {
            config.workers = w;
        }
        config.validate()?;
        Ok(config)
    };
    let config = load()
        .map_err(|e| anyhow::Error::new(e).context(ConfigError))
        .with_context(|| format!("loading {}", args.config.display()))?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    Ok((config, out))
}

fn run(args: &RunArgs) -> Result<()> {
    let (config, out) = load_config(args)?;
    let result = run_experiment(&config)?;
    write_outputs(&out, &result).with_context(|| format!("writing results to {}", out.display()))?;
    for r in result.reports() {
        match &r.failure {
            Some(f) => eprintln!("seed {}: failed: {f}", r.seed),
            None => println!(
                "seed {}: mean ESHD {:.3}{}",
                r.seed,
                r.mean_eshd.unwrap_or(f64::NAN),
                r.accuracy.map(|a| format!(", accuracy {a:.3}")).unwrap_or_default()
            ),
        }
    }
    if result.any_failed() {
        bail!("some seeds failed; partial results are in {}", out.display());
    }
    Ok(())
}

fn compare(args: &RunArgs, strategies: &[Strategy]) -> Result<()> {
    let (config, out) = load_config(args)?;
    let strategies: Vec<QueryStrategy> = strategies
        .iter()
        .map(|s| match s {
            Strategy::Bed => QueryStrategy::Bed,
            Strategy::Random => QueryStrategy::Random,
        })
        .collect();
    let (comparison, results) = compare_strategies(&config, &strategies)?;
    for (s, result) in strategies.iter().zip(&results) {
        let name = format!("{s:?}").to_lowercase();
        write_outputs(&out.join(name), result)?;
    }
    write_comparison(&out, &comparison)?;
    for s in &comparison.summaries {
        println!(
            "{:?}: mean ESHD {:.3} (95% CI {:.3} to {:.3})",
            s.strategy, s.eshd.mean, s.eshd.low, s.eshd.high
        );
    }
    if results.iter().any(|r| r.any_failed()) {
        bail!("some seeds failed; partial results are in {}", out.display());
    }
    Ok(())
}

fn serve(addr: &str, out: Option<&Path>) -> Result<()> {
    let state = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            AppState::recover(dir)?
        }
        None => AppState::new(None),
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on {}", listener.local_addr()?);
        causalmix_service::serve(listener, Arc::new(state)).await?;
        Ok(())
    })
}

fn report(out: &Path) -> Result<()> {
    let path = out.join("report.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let suite: SuiteReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    println!("{} ({:?}, config {})", suite.name, suite.config.suite, &suite.config_hash[..12]);
    println!("{:>6} {:>10} {:>10} {:>8} {:>9}", "seed", "mean_eshd", "accuracy", "queries", "status");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    for r in &suite.reports {
        println!(
            "{:>6} {:>10} {:>10} {:>8} {:>9}",
            r.seed,
            fmt(r.mean_eshd),
            fmt(r.accuracy),
            r.queries_answered,
            if r.failure.is_some() { "failed" } else { "ok" }
        );
    }
    let eshd: Vec<f64> = suite.reports.iter().filter_map(|r| r.mean_eshd).collect();
    if !eshd.is_empty() {
        let seed = suite.config.seeds.first().copied().unwrap_or(0);
        let ci = bootstrap_mean_ci(&eshd, 1000, &mut derived_rng(seed, &[u64::MAX]))?;
        println!("mean ESHD {:.3} (95% CI {:.3} to {:.3})", ci.mean, ci.low, ci.high);
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.downcast_ref::<ConfigError>().is_some()
        || e.chain().any(|c| matches!(c.downcast_ref::<causalmix::Error>(), Some(causalmix::Error::Config { .. })));
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare { run, strategies } => compare(run, strategies),
        Command::ElicitServe { addr, out } => serve(addr, out.as_deref()),
        Command::Report { out } => report(out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
