//! `brodyn`: data generation, training, evaluation and generalization
//! experiments for learned Brownian dynamics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use brodyn::error::Result;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "brodyn",
    about = "Learn Brownian dynamics of spring systems from trajectories",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override config-file values,
/// which override defaults.
#[derive(Args, Clone)]
struct Common {
    /// Config file (key = value sections)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every random quantity derives from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default 1 for bit-stable runs)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// System kind: linear | nonlinear | binary
    #[arg(long, global = true)]
    kind: Option<String>,
    /// Particle count
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Temperature (kB T)
    #[arg(long, global = true)]
    kbt: Option<f64>,
    /// Model family: brognet | bdgnn | bfgn | bnn | nn
    #[arg(long, global = true)]
    family: Option<String>,
    /// Training epoch cap
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    /// Minibatch size
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Evaluation: number of initial conditions
    #[arg(long, global = true)]
    n_init: Option<usize>,
    /// Evaluation: trajectories per initial condition
    #[arg(long, global = true)]
    seeds_per_init: Option<usize>,
    /// Evaluation: roll-out steps
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground-truth trajectories and the one-step pair dataset
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Trajectories to simulate
        #[arg(long)]
        n_traj: Option<usize>,
        /// Steps (= extracted pairs) per trajectory
        #[arg(long)]
        points: Option<usize>,
    },
    /// Train a model on a generated dataset
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (from `generate`)
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with the roll-out protocol
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (from `train`)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a predicted (or ground-truth) trajectory ensemble
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; omit for ground-truth dynamics
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot transfer to unseen sizes and temperatures
    Generalize {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report output directory
        #[arg(long)]
        out: PathBuf,
        /// Target sizes (repeatable); defaults to 50 and 500
        #[arg(long = "target-n")]
        target_n: Vec<usize>,
        /// Target temperatures (repeatable); defaults to 10 and 100
        #[arg(long = "target-kbt")]
        target_kbt: Vec<f64>,
        /// Evaluate only explicit targets
        #[arg(long)]
        no_defaults: bool,
    },
    /// Train and evaluate across dataset sizes
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Report output directory
        #[arg(long)]
        out: PathBuf,
        /// Dataset sizes (repeatable); defaults to 100 500 1000 5000 10000
        #[arg(long = "size")]
        sizes: Vec<usize>,
    },
}

fn build_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    if let Some(kind) = &common.kind {
        cfg.kind = brodyn::systems::SystemKind::parse(kind)?;
    }
    if let Some(n) = common.n {
        cfg.n = n;
    }
    if let Some(kbt) = common.kbt {
        cfg.kbt = kbt;
    }
    if let Some(family) = &common.family {
        cfg.family = brodyn::models::ModelFamily::parse(family)?;
    }
    if let Some(max_epochs) = common.max_epochs {
        cfg.train.max_epochs = max_epochs;
    }
    if let Some(batch_size) = common.batch_size {
        cfg.train.batch_size = batch_size;
    }
    if let Some(lr) = common.lr {
        cfg.train.lr = lr;
    }
    if let Some(n_init) = common.n_init {
        cfg.n_init = n_init;
    }
    if let Some(seeds) = common.seeds_per_init {
        cfg.seeds_per_init = seeds;
    }
    if let Some(steps) = common.steps {
        cfg.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Generate { common, .. }
        | Command::Train { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Rollout { common, .. }
        | Command::Generalize { common, .. }
        | Command::Sweep { common, .. } => common.clone(),
    };
    let cfg = build_config(&common)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .ok();

    match cli.command {
        Command::Generate {
            out,
            n_traj,
            points,
            ..
        } => {
            let mut cfg = cfg;
            if let Some(n_traj) = n_traj {
                cfg.n_trajectories = n_traj;
            }
            if let Some(points) = points {
                cfg.points_per_trajectory = points;
            }
            commands::cmd_generate(&cfg, &out)
        }
        Command::Train { dataset, out, .. } => commands::cmd_train(&cfg, &dataset, &out),
        Command::Evaluate {
            checkpoint, out, ..
        } => commands::cmd_evaluate(&cfg, &checkpoint, &out),
        Command::Rollout {
            checkpoint, out, ..
        } => commands::cmd_rollout(&cfg, checkpoint.as_deref(), &out),
        Command::Generalize {
            checkpoint,
            out,
            target_n,
            target_kbt,
            no_defaults,
            ..
        } => {
            let (sizes, kbts) = if no_defaults || !target_n.is_empty() || !target_kbt.is_empty() {
                (target_n, target_kbt)
            } else {
                (vec![50, 500], vec![10.0, 100.0])
            };
            commands::cmd_generalize(&cfg, &checkpoint, &out, &sizes, &kbts)
        }
        Command::Sweep { out, sizes, .. } => {
            let sizes = if sizes.is_empty() {
                vec![100, 500, 1000, 5000, 10000]
            } else {
                sizes
            };
            commands::cmd_sweep(&cfg, &out, &sizes)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
