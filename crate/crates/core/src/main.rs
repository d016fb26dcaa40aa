use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use overparam::experiment::{cmd_gen, cmd_probe, cmd_sweep, cmd_train, RunOptions};
use overparam::Error;

/// Gradient descent on wide deep ReLU networks, with diagnostics.
///
/// Exit codes: 0 success, 2 usage or config error, 3 numeric divergence,
/// 4 infeasible data request.
#[derive(Parser)]
#[command(name = "overparam", version)]
struct Cli {
    /// Output directory. Defaults to $OVERPARAM_OUT/<config stem>, or
    /// runs/<config stem> when the variable is unset. `probe` defaults to
    /// <run>/probes.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Replaces the seed in the config (the seed list for `sweep`).
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (and optional train/test split).
    Gen {
        /// TOML config, or the manifest.json of an earlier `gen`.
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a network by full-batch gradient descent.
    Train {
        /// TOML config, or the manifest.json of an earlier `train`.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run measurement probes against a training run.
    Probe {
        /// Run directory written by `train`.
        run: Option<PathBuf>,
        /// Optional TOML probe settings, or the manifest.json of an earlier `probe`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated probe names or `all`: scaling, semismoothness,
        /// grad-upper, grad-lower, init-output, hidden-separability, gmatrix.
        #[arg(long)]
        probes: Option<String>,
    },
    /// Train over a grid and aggregate metrics and bound terms.
    Sweep {
        /// TOML config, or the manifest.json of an earlier `sweep`.
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<PathBuf, Error> {
    let opts = RunOptions { out: cli.out, seed_override: cli.seed_override };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Error::Config(format!("workers: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Gen { config } => cmd_gen(config, &opts),
        Command::Train { config } => cmd_train(config, &opts),
        Command::Probe { run, config, probes } => cmd_probe(run.as_deref(), config.as_deref(), probes.as_deref(), &opts),
        Command::Sweep { config } => cmd_sweep(config, &opts),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("overparam: {e}");
            if let Error::Diverged { last_finite, .. } = &e {
                eprintln!("overparam: trajectory up to iteration {last_finite} was written");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
