//! `teledrive`: one binary, subcommand per pipeline stage. Configuration
//! comes from a TOML file plus flag overrides (flags win); every stage
//! derives its randomness from the single root seed.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use teledrive_core::cvae::Role;
use teledrive_core::{Error, Result};

use config::AppConfig;

#[derive(Parser)]
#[command(
    name = "teledrive",
    version,
    about = "Generative simulation of teleoperated driving in canyon terrain"
)]
struct Cli {
    /// Configuration file (TOML); defaults apply for anything omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap on worker threads for parallel-capable stages
    /// (falls back to the TDG_THREADS environment variable, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    /// Perception generator: past window -> current lidar vector.
    Forward,
    /// Behavior generator: past window + perception -> current control.
    Inverse,
}

impl From<RoleArg> for Role {
    fn from(value: RoleArg) -> Role {
        match value {
            RoleArg::Forward => Role::Forward,
            RoleArg::Inverse => Role::Inverse,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a canyon course and write terrain.json.
    GenTerrain {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured scripted-driver population over a terrain.
    Collect {
        /// Terrain file from gen-terrain.
        #[arg(long)]
        terrain: PathBuf,
        /// Output directory (episodes land in episodes/).
        #[arg(long)]
        out: PathBuf,
    },
    /// Pack episode logs into a sliding-window training dataset.
    BuildDataset {
        /// Which model the dataset targets.
        #[arg(long)]
        role: RoleArg,
        /// Directory of episode logs (*.log).
        #[arg(long)]
        episodes: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and save its checkpoint, metadata, and loss log.
    Train {
        /// Which model to train.
        #[arg(long)]
        role: RoleArg,
        /// Dataset file from build-dataset.
        #[arg(long)]
        dataset: PathBuf,
        /// Trained perception checkpoint; conditions inverse training
        /// unless training.ground_truth_perception is set.
        #[arg(long, value_name = "CKPT")]
        forward_model: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive a terrain closed-loop with a trained behavior model.
    Rollout {
        /// Behavior model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Perception checkpoint; replaces simulator perception when
        /// rollout.hallucinated_perception is set.
        #[arg(long, value_name = "CKPT")]
        forward_model: Option<PathBuf>,
        /// Terrain file the rollouts drive.
        #[arg(long)]
        terrain: PathBuf,
        /// Output directory (episodes land in rollouts/).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a reference episode population against a candidate one.
    Evaluate {
        /// Directory of reference (scripted-driver) episode logs.
        #[arg(long)]
        drivers: PathBuf,
        /// Directory of candidate (model rollout) episode logs.
        #[arg(long)]
        model: PathBuf,
        /// Terrain both populations drove.
        #[arg(long)]
        terrain: PathBuf,
        /// Output directory for the three report CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// Optional output directory for the report; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Load the config (defaults when no file), fold in the seed override, and
/// fingerprint the effective tree so manifests capture what actually ran.
fn effective_config(path: Option<&Path>, seed_flag: Option<u64>) -> Result<(AppConfig, String, u64)> {
    let mut config = match path {
        Some(p) => config::parse_config(p)?,
        None => AppConfig::default(),
    };
    let root = seed_flag.unwrap_or(config.seed);
    config.seed = root;
    let hash = manifest::sha256_text(&config.to_toml()?);
    Ok((config, hash, root))
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let threads = match flag {
        Some(v) => v,
        None => match std::env::var("TDG_THREADS") {
            Ok(raw) => raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("TDG_THREADS is not a thread count: {raw:?}")))?,
            Err(_) => 1,
        },
    };
    if threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    Ok(threads)
}

fn run(cli: Cli) -> Result<()> {
    let (config, hash, root) = effective_config(cli.config.as_deref(), cli.seed)?;
    // Current stages run single-threaded; the cap is validated and held for
    // any parallel-capable stage added later.
    let _threads = resolve_threads(cli.threads)?;

    match cli.command {
        Command::GenTerrain { out } => commands::gen_terrain(&config, hash, root, &out),
        Command::Collect { terrain, out } => {
            commands::collect(&config, hash, root, &terrain, &out)
        }
        Command::BuildDataset { role, episodes, out } => {
            commands::build_dataset_cmd(hash, root, role.into(), &episodes, &out)
        }
        Command::Train { role, dataset, forward_model, out } => commands::train(
            &config,
            hash,
            root,
            role.into(),
            &dataset,
            forward_model.as_deref(),
            &out,
        ),
        Command::Rollout { model, forward_model, terrain, out } => commands::rollout_cmd(
            &config,
            hash,
            root,
            &model,
            forward_model.as_deref(),
            &terrain,
            &out,
        ),
        Command::Evaluate { drivers, model, terrain, out } => {
            commands::evaluate(hash, root, &drivers, &model, &terrain, &out)
        }
        Command::Gradcheck { out } => commands::gradcheck(hash, root, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version print to stdout and exit 0; usage errors
            // print to stderr and exit 2.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "message": err.to_string() });
            eprintln!("error: {line}");
            ExitCode::from(1)
        }
    }
}
