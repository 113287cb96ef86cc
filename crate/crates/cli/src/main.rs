use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ppa_hedge::commands;
use ppa_hedge::config::{Profile, RunConfig, ENV_THREADS};
use ppa_hedge::hedging::es_column;
use ppa_hedge::Error;

/// Simulation and deep hedging of green power purchase agreements.
#[derive(Debug, Parser)]
#[command(name = "ppa-hedge", version)]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// `full` uses the configuration as written, `desk` shrinks training.
    #[arg(long, global = true, default_value = "full")]
    profile: String,

    /// Output directory (overrides the config and the environment).
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads for the parallel sections.
    #[arg(long, global = true, env = ENV_THREADS)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the efficiency shift per technology.
    Calibrate,
    /// Export simulated paths and martingale diagnostics.
    Simulate {
        #[arg(long, default_value_t = 1000)]
        paths: usize,
        /// Defaults to `eval.eval_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a deep-hedging network.
    Train,
    /// Table of PnL statistics for the benchmarks and trained networks.
    Evaluate {
        /// Weight files written by `train`.
        weights: Vec<PathBuf>,
    },
    /// Figure data for a trained network.
    Report {
        #[arg(long)]
        weights: PathBuf,
    },
    /// Statistical-arbitrage run plus martingale and gradient diagnostics.
    Selfcheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = cfg.with_profile(cli.profile.parse::<Profile>()?).with_env();
    if let Some(dir) = &cli.output {
        cfg.output.directory = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, Error> {
    let cfg = load_config(&cli)?;
    log::info!("config hash {} -> {}", cfg.hash(), cfg.output.directory.display());
    match cli.command {
        Command::Calibrate => {
            println!("technology,initial_forecast,phi,residual");
            for r in commands::calibrate(&cfg)? {
                println!("{},{},{},{:e}", r.technology, r.initial_forecast, r.phi, r.residual);
            }
        }
        Command::Simulate { paths, seed } => {
            let out = commands::simulate(&cfg, paths, seed.unwrap_or(cfg.eval.eval_seed))?;
            println!("t,fwd_mean,fwd_se");
            for r in &out.martingale {
                println!("{},{:.6},{:.6}", r.t, r.fwd_mean, r.fwd_se);
            }
            println!("max |z| = {:.3}", out.max_z);
            for f in out.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Train => {
            let out = commands::train(&cfg)?;
            println!("final training loss {:.6}", out.final_loss);
            for (a, es) in &out.held_out.es {
                println!("held-out {} {:.6}", es_column(*a), -es);
            }
            println!("held-out mean {:.6} variance {:.6}", out.held_out.mean, out.held_out.variance);
            println!("wrote {}", out.weights.display());
            println!("wrote {}", out.history.display());
        }
        Command::Evaluate { weights } => {
            let rows = commands::evaluate(&cfg, &weights)?;
            let levels = &cfg.eval.es_levels;
            let head: Vec<String> = levels.iter().map(|a| es_column(*a)).collect();
            println!("{:<22} {:>10} {:>10} {:>10} {}", "strategy", "mean", "variance", "skewness", head.join(" "));
            for (name, s) in rows {
                let es: Vec<String> = levels
                    .iter()
                    .map(|a| format!("{:>9.4}", s.table_es(*a).unwrap_or(f64::NAN)))
                    .collect();
                println!(
                    "{:<22} {:>10.4} {:>10.4} {:>10.4} {}",
                    name,
                    s.mean,
                    s.variance,
                    s.skewness,
                    es.join(" ")
                );
            }
        }
        Command::Report { weights } => {
            for f in commands::report(&cfg, &weights)?.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Selfcheck => {
            let checks = commands::selfcheck(&cfg)?;
            for c in &checks {
                let tag = if c.passed() { "PASS" } else { "FAIL" };
                println!("{tag} {:<28} {:.3e} < {:.1e}", c.name, c.value, c.threshold);
            }
            return Ok(checks.iter().all(|c| c.passed()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
