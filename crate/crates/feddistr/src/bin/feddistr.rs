//! Command-line front end: generate benchmark data, run a single protocol
//! pass, sweep the entanglement grid, or tabulate the theory bounds.

use clap::{Parser, Subcommand};
use feddistr::harness::{self, config, csv, RunConfig};
use feddistr::mixture::partition_for_xi;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "feddistr", about = "One-round federated distribution-matching simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser)]
struct CommonArgs {
    /// Path to a key=value config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root RNG seed; overrides the config file
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run mode; overrides the config file
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the benchmark mixture into client shards and write them out
    Gen(CommonArgs),
    /// Run one seeded pass of the selected mode and report metrics
    Run(CommonArgs),
    /// Run the full xi-by-mode grid
    Sweep(CommonArgs),
    /// Monte Carlo validation of the utility-loss bounds
    Theory(CommonArgs),
}

fn load_config(args: &CommonArgs) -> feddistr::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            RunConfig::parse(&text, args.seed)?
        }
        None => {
            let seed = args.seed.ok_or_else(|| {
                feddistr::Error::Config("pass --seed or a --config file with a seed key".into())
            })?;
            RunConfig::default_with_seed(seed)
        }
    };
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(dir: &Option<PathBuf>, name: &str, contents: &str) -> feddistr::Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        fs::write(&path, contents)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gen(args: &CommonArgs) -> feddistr::Result<()> {
    let cfg = load_config(args)?;
    let spec = harness::benchmark_mixture(cfg.bases, cfg.dim, cfg.labels)?;
    let mut rng = harness::stream_rng(cfg.seed, 1);
    let shards = partition_for_xi(&spec, cfg.clients, cfg.xi, cfg.n_per_client, &mut rng)?;
    let total: usize = shards.iter().map(|s| s.points.len()).sum();
    println!(
        "sampled {} points across {} clients (xi target {})",
        total,
        shards.len(),
        cfg.xi
    );
    write_out(&args.out, "mixture.txt", &config::mixture_to_text(&spec))?;
    write_out(&args.out, "shards.csv", &csv::shards_to_csv(&shards))?;
    Ok(())
}

fn cmd_run(args: &CommonArgs) -> feddistr::Result<()> {
    let cfg = load_config(args)?;
    let metrics = harness::run(&cfg)?;
    println!(
        "mode={} seed={} xi={:.4} mean_accuracy={:.4} utility_loss={:.4} rounds={} uplink={} downlink={}",
        metrics.mode,
        metrics.seed,
        metrics.realized_xi,
        metrics.mean_accuracy,
        metrics.utility_loss,
        metrics.ledger.rounds,
        metrics.ledger.uplink_scalars,
        metrics.ledger.downlink_scalars,
    );
    write_out(&args.out, "metrics.csv", &csv::metrics_to_csv(&metrics))?;
    Ok(())
}

fn cmd_sweep(args: &CommonArgs) -> feddistr::Result<()> {
    let cfg = load_config(args)?;
    let rows = harness::sweep(&cfg)?;
    for row in &rows {
        match &row.outcome {
            Ok(m) => println!(
                "mode={} xi={:.4} mean_accuracy={:.4} rounds_to_target={}",
                row.mode,
                row.xi,
                m.mean_accuracy,
                m.rounds_to_target.map_or("-".to_string(), |r| r.to_string()),
            ),
            Err(e) => println!("mode={} xi={:.4} failed: {e}", row.mode, row.xi),
        }
    }
    write_out(&args.out, "sweep.csv", &csv::sweep_to_csv(&rows))?;
    Ok(())
}

const THEORY_TRIALS: usize = 2000;

fn cmd_theory(args: &CommonArgs) -> feddistr::Result<()> {
    let cfg = load_config(args)?;
    let rows = harness::theory_table(&cfg, THEORY_TRIALS)?;
    for r in &rows {
        println!(
            "n={} eps={} bound={:.6} empirical={:.6}",
            r.n, r.eps, r.bound, r.empirical
        );
    }
    write_out(&args.out, "theory.csv", &csv::theory_to_csv(&rows))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Theory(args) => cmd_theory(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
