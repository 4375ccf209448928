//! `tps`: train, sample and evaluate transition-path samplers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tps_core::baselines::{Restraint, SmdAnchor};
use tps_core::eval::EtsScan;
use tps_core::training::Ablation;
use tps_core::CoreError;

pub const VERSION: &str = env!("TPS_VERSION");

#[derive(Parser, Debug)]
#[command(name = "tps", version = VERSION, about = "Transition path sampling with learned bias forces")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root for default output directories.
    #[arg(long, global = true, env = "TPS_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the state saved in the output directory.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every N rollouts.
        #[arg(long, default_value_t = 1)]
        save_every: usize,
        /// Stop after this many rollouts in this invocation (resume later).
        #[arg(long)]
        max_rollouts: Option<usize>,
    },
    /// Sample paths from a trained checkpoint and report metrics.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        /// Proceed even if the checkpoint was trained with a different config.
        #[arg(long)]
        force: bool,
    },
    /// Unbiased or steered MD reference ensembles.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        #[arg(long, default_value = "double_well")]
        system: String,
        /// Temperature in kelvin (default: the system temperature).
        #[arg(long)]
        temp: Option<f64>,
        /// Restraint force constant (smd only).
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, value_enum, default_value = "fixed")]
        anchor: AnchorArg,
        #[arg(long, value_enum, default_value = "full")]
        restraint: RestraintArg,
        #[command(flatten)]
        ensemble: EnsembleArgs,
    },
    /// Rejection-sampled ground-truth ensemble.
    Oracle {
        #[arg(long, default_value = "double_well")]
        system: String,
        #[arg(long, default_value_t = 1_000_000)]
        budget: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "first-hit")]
        ets_scan: ScanArg,
    },
    /// Report metrics for a stored path ensemble.
    Eval {
        #[arg(long)]
        paths: PathBuf,
        #[arg(long, default_value = "double_well")]
        system: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "first-hit")]
        ets_scan: ScanArg,
    },
    /// Train and evaluate one ablation of a config.
    Ablate {
        toggle: Ablation,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bias force on a grid of a planar system.
    FieldDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "double_well")]
        system: String,
        #[arg(long, num_args = 2, default_values_t = [-2.5, 2.5], allow_negative_numbers = true)]
        x: Vec<f64>,
        #[arg(long, num_args = 2, default_values_t = [-2.5, 2.5], allow_negative_numbers = true)]
        y: Vec<f64>,
        /// Grid points per axis.
        #[arg(long, default_value_t = 41)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct EnsembleArgs {
    /// Number of paths.
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the paths to `paths.bin`.
    #[arg(long)]
    save_paths: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineKind {
    Umd,
    Smd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnchorArg {
    Fixed,
    Moving,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RestraintArg {
    Full,
    Half,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScanArg {
    FirstHit,
    Full,
}

impl From<ScanArg> for EtsScan {
    fn from(s: ScanArg) -> Self {
        match s {
            ScanArg::FirstHit => EtsScan::FirstHit,
            ScanArg::Full => EtsScan::Full,
        }
    }
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_)
        | CoreError::Invalid(_)
        | CoreError::Dimension { .. }
        | CoreError::EmptyEnsemble
        | CoreError::EmptyBuffer => 2,
        CoreError::Diverged(_) | CoreError::NonFinite { .. } | CoreError::NonFiniteStep { .. } | CoreError::Autodiff(_) => 3,
        CoreError::Io { .. } | CoreError::Format { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CoreError::Config(format!("--threads: {e}")))?;
    }
    let root = cli.out_root;
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            save_every,
            max_rollouts,
        } => commands::train(&root, &config, out, resume, save_every, max_rollouts),
        Command::Sample {
            config,
            checkpoint,
            ensemble,
            force,
        } => commands::sample(&root, &config, &checkpoint, ensemble.into(), force),
        Command::Baseline {
            kind,
            system,
            temp,
            k,
            anchor,
            restraint,
            ensemble,
        } => {
            let smd = matches!(kind, BaselineKind::Smd).then_some(commands::SmdArgs {
                k,
                anchor: match anchor {
                    AnchorArg::Fixed => SmdAnchor::Fixed,
                    AnchorArg::Moving => SmdAnchor::Moving,
                },
                restraint: match restraint {
                    RestraintArg::Full => Restraint::Full,
                    RestraintArg::Half => Restraint::Half,
                },
            });
            commands::baseline(&root, &system, temp, smd, ensemble.into())
        }
        Command::Oracle {
            system,
            budget,
            seed,
            out,
            ets_scan,
        } => commands::oracle(&root, &system, budget, seed, out, ets_scan.into()),
        Command::Eval {
            paths,
            system,
            out,
            ets_scan,
        } => commands::eval(&root, &paths, &system, out, ets_scan.into()),
        Command::Ablate { toggle, config, out } => commands::ablate(&root, toggle, &config, out),
        Command::FieldDump {
            checkpoint,
            system,
            x,
            y,
            resolution,
            out,
        } => commands::field_dump(&checkpoint, &system, [x[0], x[1]], [y[0], y[1]], resolution, &out),
    }
}

impl From<EnsembleArgs> for commands::Ensemble {
    fn from(a: EnsembleArgs) -> Self {
        Self {
            paths: a.paths,
            seed: a.seed,
            out: a.out,
            save_paths: a.save_paths,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
