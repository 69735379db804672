//! Command-line driver: manifold generation, offline training, online
//! reconstruction and evaluation campaigns.
//!
//! Exit codes: 0 on success, 2 on usage/configuration errors, 3 on
//! numerical failures, 1 on I/O problems.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowrec::config::RunConfig;
use flowrec::pipeline::{self, MeasurementSource, OnlineContext, ReconstructMode};
use flowrec::Error;

#[derive(Parser)]
#[command(name = "flowrec", version, about = "Flow state estimation from beam-projected voxel measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the run configuration JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the solution manifold and persist the snapshot store.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory of the manifold store.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the manifold seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train partition grids and certificates from a manifold store.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Manifold store directory.
        #[arg(long)]
        manifold: PathBuf,
        /// Output directory of the trained store.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a state from measurements.
    Reconstruct {
        /// Trained store directory.
        #[arg(long)]
        trained: PathBuf,
        /// Measurements CSV (voxel_index,value).
        #[arg(long, conflicts_with_all = ["manifold", "snapshot"])]
        measurements: Option<PathBuf>,
        /// Manifold store to draw a synthetic measurement from.
        #[arg(long, requires = "snapshot")]
        manifold: Option<PathBuf>,
        /// Snapshot index into the manifold store.
        #[arg(long, requires = "manifold")]
        snapshot: Option<usize>,
        /// Noise level alpha for synthetic measurements ("inf" for none).
        #[arg(long, default_value = "inf")]
        alpha: String,
        /// Seed of the synthetic noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Observed time within the cycle (s).
        #[arg(long)]
        t: f64,
        /// Observed heart rate (beats/min).
        #[arg(long)]
        hr: f64,
        /// Reconstruction mode.
        #[arg(long, value_parser = ["pbdw", "joint", "ls", "cls"])]
        mode: String,
        /// Optional reduced dimension override.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation campaign on the held-out trajectories.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        trained: PathBuf,
        #[arg(long)]
        manifold: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Domain(_)
        | Error::TagMismatch { .. }
        | Error::OutOfRange(_)
        | Error::Store(_) => 2,
        Error::Io { .. } => 1,
        _ => 3,
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out, seed } => {
            let mut cfg = RunConfig::load(&config.config)?;
            if let Some(seed) = seed {
                cfg.manifold.seed = seed;
            }
            let outcome = pipeline::cmd_generate(&cfg, &out)?;
            println!(
                "generated {} snapshots in {:.1} s (manifest hash {})",
                outcome.snapshots, outcome.wall_seconds, outcome.manifest_hash
            );
        }
        Command::Train { config, manifold, out } => {
            let cfg = RunConfig::load(&config.config)?;
            let outcome = pipeline::cmd_train(&cfg, &manifold, &out)?;
            println!(
                "trained: velocity partition {}x{}, joint partition {}x{}, sigma_ref {:.4e}, {:.1} s",
                outcome.velocity_partition.0,
                outcome.velocity_partition.1,
                outcome.joint_partition.0,
                outcome.joint_partition.1,
                outcome.sigma_ref,
                outcome.wall_seconds
            );
        }
        Command::Reconstruct { trained, measurements, manifold, snapshot, alpha, seed, t, hr, mode, n, out } => {
            let mode: ReconstructMode = mode.parse()?;
            let alpha: f64 = if alpha == "inf" {
                f64::INFINITY
            } else {
                alpha.parse().map_err(|_| Error::Config(format!("bad alpha {alpha:?}")))?
            };
            let ctx = OnlineContext::load(&trained)?;
            let source = match (measurements, manifold, snapshot) {
                (Some(path), None, None) => MeasurementSource::Csv(path),
                (None, Some(dir), Some(index)) => {
                    MeasurementSource::Snapshot { manifold_dir: dir, index, alpha, seed }
                }
                _ => {
                    return Err(Error::Config(
                        "provide either --measurements or --manifold with --snapshot".into(),
                    ))
                }
            };
            let joint = mode == ReconstructMode::Joint;
            let (z, _) = pipeline::acquire_measurements(&ctx, &source, joint)?;
            let diag = pipeline::cmd_reconstruct(&ctx, &z, (t, hr), mode, n, &out)?;
            println!(
                "reconstructed in cell ({},{}) with n = {}, beta = {:.4e}, bound = {:.4e}",
                diag.cell.0, diag.cell.1, diag.n_used, diag.beta, diag.bound
            );
        }
        Command::Evaluate { config, trained, manifold, out } => {
            let cfg = RunConfig::load(&config.config)?;
            let ctx = OnlineContext::load(&trained)?;
            let summary = pipeline::cmd_evaluate(&cfg, &ctx, &manifold, &out)?;
            println!(
                "evaluated {} snapshots: bound violations {}/{}, dp violations {}/{}, mean H1 error {:.3e}",
                summary.test_snapshots,
                summary.bound_violations,
                summary.bound_checks,
                summary.dp_violations,
                summary.dp_checks,
                summary.mean_rel_err_u
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
