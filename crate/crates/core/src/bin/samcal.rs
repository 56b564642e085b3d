use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use samcal::experiment::{
    cmd_calibrate, cmd_evaluate, cmd_gen_data, cmd_sweep, cmd_theory, cmd_train, default_probe_config,
    error_exit_code, CommandOutcome, ExperimentConfig, PosthocMethod,
};
use samcal::metrics::DEFAULT_BINS;
use samcal::Result;

#[derive(Parser)]
#[command(name = "samcal", version, about = "SGD / SAM / CSAM training and calibration lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test CSVs from the data section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides data.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model (or ensemble) and evaluate every split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides model.seed and train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Record per-step (p, p_tilde) probes.
        #[arg(long)]
        probe: bool,
        /// Directory with train.csv, val.csv and test.csv.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on dataset CSVs.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Fit a post-hoc calibrator on val and report on test.
    ///
    /// With --checkpoint, --val and --test are dataset CSVs; otherwise they
    /// are logits CSVs.
    Calibrate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "temperature")]
        method: PosthocMethod,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Sample the entropy inequalities and the lambda landscape.
    Theory {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides theory.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also run a batch-size-1 SAM probe run and its monitor.
        #[arg(long)]
        probe: bool,
    },
    /// One training run per sweep value and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> Result<CommandOutcome> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cmd_gen_data(&cfg, &out)
        }
        Command::Train {
            config,
            out,
            seed,
            probe,
            data,
        } => {
            let mut cfg = load(&config, seed)?;
            cfg.train.probe |= probe;
            cmd_train(&cfg, &out, data.as_deref())
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
            bins,
        } => cmd_evaluate(&checkpoint, &data, bins, &out),
        Command::Calibrate {
            checkpoint,
            val,
            test,
            method,
            out,
            bins,
        } => cmd_calibrate(checkpoint.as_deref(), &val, &test, method, bins, &out),
        Command::Theory {
            config,
            out,
            seed,
            probe,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => default_probe_config(),
            };
            if let Some(s) = seed {
                cfg.theory.seed = s;
            }
            cmd_theory(&cfg, &out, probe)
        }
        Command::Sweep { config, out, seed, data } => cmd_sweep(&load(&config, seed)?, &out, data.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            ExitCode::from(outcome.status.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_exit_code(&e) as u8)
        }
    }
}
