//! Command-line harness for crosslearn experiments.
//!
//! ```text
//! crosslearn gaussian-sweep --config configs/gaussian.toml
//! crosslearn --config configs/sweep.toml --epsilon 0 --epsilon 0.5 --epsilon inf
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crosslearn::experiment::{mean_std, run, ExperimentConfig, Mode, RunOutput};
use crosslearn::Centrality;

#[derive(Debug, Parser)]
#[command(name = "crosslearn", version, about = "Cross-learning experiments: Gaussian study, epsilon sweeps, projection checks")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for result tables and the resolved-config sidecar.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Grid point; repeatable, comma lists allowed. `inf` is the agnostic end.
    #[arg(long, global = true, value_delimiter = ',', value_parser = parse_centrality)]
    epsilon: Vec<Centrality>,

    /// Mode to run when no subcommand is given.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,

    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Subcommand, Clone, Copy)]
enum Command {
    /// MSE of the two-mean estimator across ε, closed form and Monte Carlo.
    GaussianSweep,
    /// One multi-task training run per ε with held-out metrics.
    EpsilonSweep,
    /// A single training run with per-epoch history.
    SingleTrain,
    /// Randomized dual projection vs. brute-force oracle.
    ProjectCheck,
}

impl Command {
    fn mode(self) -> Mode {
        match self {
            Command::GaussianSweep => Mode::GaussianSweep,
            Command::EpsilonSweep => Mode::EpsilonSweep,
            Command::SingleTrain => Mode::SingleTrain,
            Command::ProjectCheck => Mode::ProjectCheck,
        }
    }
}

fn parse_centrality(s: &str) -> Result<Centrality, String> {
    s.parse().map_err(|e: crosslearn::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: crosslearn::Error| e.to_string())
}

fn resolve(cli: &Cli) -> crosslearn::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let sub = cli.command.map(Command::mode);
    match (sub, cli.mode) {
        (Some(a), Some(b)) if a != b => {
            return Err(crosslearn::Error::Config(format!(
                "subcommand {a} conflicts with --mode {b}"
            )))
        }
        (Some(m), _) | (None, Some(m)) => cfg.mode = m,
        (None, None) => {}
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if !cli.epsilon.is_empty() {
        cfg.epsilon = cli.epsilon.clone();
    }
    Ok(cfg)
}

/// Prints a short human summary; returns false when some grid point failed.
fn report(output: &RunOutput) -> bool {
    match output {
        RunOutput::GaussianSweep(r) => {
            let c = &r.certificate;
            println!(
                "mse(eps0)/sigma_M^2 = {:.6} (claim 1 {}), D(0) = {:.6} (claim 2 {}), grid minimum at eps = {}",
                c.claim1_ratio,
                verdict(c.claim1_holds),
                c.derivative_at_zero,
                verdict(c.claim2_holds),
                c.grid_minimizer
            );
            true
        }
        RunOutput::EpsilonSweep(r) => {
            let mut ok = true;
            for p in &r.points {
                match &p.result {
                    Ok(v) => {
                        let (mean, std) = mean_std(v);
                        println!("eps = {:<8} {} {mean:.4} ± {std:.4}", p.epsilon.to_string(), r.metric.name());
                    }
                    Err(e) => {
                        ok = false;
                        eprintln!("eps = {:<8} failed: {e}", p.epsilon.to_string());
                    }
                }
            }
            ok
        }
        RunOutput::SingleTrain(r) => {
            if let Some(last) = r.history.last() {
                println!(
                    "eps = {}: {} epochs, final max deviation {:.3e}",
                    r.epsilon,
                    r.history.len(),
                    last.max_deviation
                );
            }
            true
        }
        RunOutput::ProjectCheck(r) => {
            println!(
                "{} trials: max objective gap {:.3e}, max violation {:.3e}, slackness ratio {:.3}, unconverged {}",
                r.trials, r.max_objective_gap, r.max_violation, r.max_slackness_ratio, r.unconverged
            );
            true
        }
    }
}

fn verdict(holds: bool) -> &'static str {
    if holds {
        "holds"
    } else {
        "FAILS"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if cli.dry_run {
        return match cfg.validate().and_then(|_| cfg.to_json_pretty()) {
            Ok(text) => {
                println!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        };
    }
    log::info!("running {} into {}", cfg.mode, cfg.out_dir.display());
    match run(&cfg) {
        Ok((output, files)) => {
            let ok = report(&output);
            for f in files {
                println!("wrote {}", f.display());
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
