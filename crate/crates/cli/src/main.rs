use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use posmat_cli::{run_experiment, CliError, Command, ExperimentConfig};

/// Products of i.i.d. positive random matrices: experiment runner.
///
/// Flags may also be set through POSMAT_CONFIG, POSMAT_SEED, POSMAT_THREADS,
/// POSMAT_OUT and POSMAT_QUIET; explicit flags take precedence.
#[derive(Debug, Parser)]
#[command(name = "posmat", version)]
struct Cli {
    /// TOML experiment config; missing fields take defaults.
    #[arg(long, global = true, env = "POSMAT_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "POSMAT_SEED")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "POSMAT_THREADS")]
    threads: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long, global = true, env = "POSMAT_OUT")]
    out: Option<PathBuf>,
    #[arg(short, long, global = true, env = "POSMAT_QUIET")]
    quiet: bool,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Batch of trajectories to CSV.
    Simulate,
    /// Pressure curve, cumulants and Cramér series.
    Spectral,
    /// Sup-gap ladder and rate fit for all four observables.
    BerryEsseen,
    /// Measured over predicted moderate-deviation tail ratios.
    Mdr,
    /// Moderate-deviation rate sequence.
    Mdp,
    /// Three normalized second moments.
    Variance,
    /// Stationary-measure regularity exponent.
    Regularity,
    /// Tilted tail probabilities at each level.
    Tilt,
    /// Condition report of the law.
    Check,
    /// Prints the effective config as TOML.
    Config,
}

fn run(cli: Cli) -> Result<Option<String>, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.display().to_string();
    }
    let command = match cli.command {
        Sub::Config => return Ok(Some(cfg.to_toml()?)),
        Sub::Simulate => Command::Simulate,
        Sub::Spectral => Command::Spectral,
        Sub::BerryEsseen => Command::BerryEsseen,
        Sub::Mdr => Command::Mdr,
        Sub::Mdp => Command::Mdp,
        Sub::Variance => Command::Variance,
        Sub::Regularity => Command::Regularity,
        Sub::Tilt => Command::Tilt,
        Sub::Check => Command::Check,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = pool.install(|| run_experiment(command, &cfg))?;
    if cli.quiet {
        return Ok(None);
    }
    let mut msg = outcome.summary;
    for f in &outcome.files {
        msg.push_str(&format!("\n  wrote {}", f.display()));
    }
    Ok(Some(msg))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            let e = CliError::Config(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", e.to_json_line());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(Some(msg)) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
