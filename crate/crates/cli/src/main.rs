//! One binary for the whole pipeline: `dataset`, `train`, `sample`,
//! `sample-constrained`, `eval`, `reconstruct`. Every run is reproducible
//! under `--seed`; `--threads` (or CGDF_THREADS) caps the worker pool
//! without changing any output byte.

mod commands;
mod config;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use commands::*;
use config::{load_file_config, resolve_gripper, resolve_schedule, FileConfig};
use graspdiff_core::diffusion::NoiseSchedule;
use graspdiff_core::eval::{DEFAULT_FC_DELTA, DEFAULT_FC_EPS, DEFAULT_FRICTION};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "graspdiff",
    about = "SE(3) energy-based grasp diffusion: toy datasets, training, constrained sampling and analytic evaluation",
    version
)]
struct Cli {
    /// Root seed; every stochastic stage derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (default: all cores; CGDF_THREADS as fallback).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON config file mirroring the flags (flags win).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ScheduleFlags {
    /// Number of noise levels.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    /// Step-size coefficient: alpha_k = eta * sigma_k / sigma_min.
    #[arg(long)]
    eta: Option<f64>,
    /// Langevin steps per noise level.
    #[arg(long)]
    steps_per_level: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset (meshes, verified grasp labels, manifest).
    Dataset {
        /// Shape spec JSON; omit to use the built-in three toy shapes.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Grasps per shape when using the built-in spec.
        #[arg(long, default_value_t = 200)]
        grasps: usize,
    },
    /// Train the pose-energy model on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint output path; the loss CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// Continue from an existing checkpoint (appends to the CSV).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda_sdf: Option<f64>,
        #[arg(long)]
        scaled_loss: Option<bool>,
        /// Feature-plane resolution for a fresh model.
        #[arg(long)]
        resolution: Option<usize>,
        /// Feature dimension for a fresh model.
        #[arg(long)]
        feat_dim: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[command(flatten)]
        schedule: ScheduleFlags,
    },
    /// Sample M grasps on an object by annealed Langevin diffusion.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Object: obj/ply mesh (surface sampled) or ply point cloud.
        #[arg(long)]
        input: PathBuf,
        /// Number of grasps (independent chains).
        #[arg(long, short = 'm', default_value_t = 32)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional PLY with gripper markers per grasp.
        #[arg(long)]
        markers: Option<PathBuf>,
        /// Cloud size when the input is a mesh.
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[command(flatten)]
        schedule: ScheduleFlags,
    },
    /// Part-guided sampling constrained to target regions.
    SampleConstrained {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, short = 'm', default_value_t = 32)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        markers: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        /// Region file: JSON list of index lists into the sampled cloud.
        #[arg(long, conflicts_with = "auto_regions")]
        region_file: Option<PathBuf>,
        /// Derive regions automatically: farthest-point seeds + kNN.
        #[arg(long)]
        auto_regions: bool,
        /// Neighbors per auto region.
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Number of auto regions.
        #[arg(long, default_value_t = 2)]
        regions: usize,
        /// Sample against the target context alone (the naive baseline)
        /// instead of part-guided composition.
        #[arg(long)]
        naive: bool,
        #[command(flatten)]
        schedule: ScheduleFlags,
    },
    /// Analytic metrics for a grasps file against the object mesh.
    Eval {
        #[arg(long)]
        grasps: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// Region JSON (index lists); enables the target-grasp ratio.
        #[arg(long)]
        region: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Append a summary row to this CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Energy threshold; enables the sample-efficiency metric.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_FRICTION)]
        friction: f64,
        #[arg(long, default_value_t = DEFAULT_FC_EPS)]
        fc_eps: f64,
        #[arg(long, default_value_t = DEFAULT_FC_DELTA)]
        fc_delta: f64,
        /// Cloud size used to resolve region indices.
        #[arg(long, default_value_t = 1000)]
        points: usize,
    },
    /// Extract the SDF zero set of a trained model and report Chamfer
    /// distance against the input cloud.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// SDF evaluation grid resolution.
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 1000)]
        points: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("CGDF_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        graspdiff_core::exec::init_thread_pool(n);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| {
                let s = c.to_string();
                s.contains("diverged") || s.contains("no canonical branch") || s.contains("non-finite")
            });
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_CONFIG })
        }
    }
}

fn schedule_from(
    flags: &ScheduleFlags,
    file_cfg: &FileConfig,
    checkpoint_sigmas: Option<&[f64]>,
) -> NoiseSchedule {
    resolve_schedule(
        file_cfg.schedule.as_ref(),
        flags.levels,
        flags.sigma_max,
        flags.sigma_min,
        flags.eta,
        flags.steps_per_level,
        checkpoint_sigmas,
    )
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Dataset { spec, out, grasps } => {
            cmd_dataset(spec.as_deref(), &out, grasps, cli.seed)
        }
        Command::Train {
            dataset,
            out,
            resume,
            epochs,
            batch_size,
            lr,
            lambda_sdf,
            scaled_loss,
            resolution,
            feat_dim,
            checkpoint_every,
            schedule,
        } => {
            let sched = schedule_from(&schedule, &file_cfg, None);
            cmd_train(
                &TrainArgs {
                    dataset_dir: dataset,
                    out,
                    resume,
                    seed: cli.seed,
                    epochs,
                    batch_size,
                    lr,
                    lambda_sdf,
                    scaled_loss,
                    resolution,
                    feat_dim,
                    checkpoint_every,
                },
                &file_cfg,
                &sched,
            )
        }
        Command::Sample {
            checkpoint,
            input,
            count,
            out,
            markers,
            points,
            schedule,
        } => {
            let model_sigmas = graspdiff_core::checkpoint::load_checkpoint(&checkpoint)
                .ok()
                .map(|m| m.train_sigmas);
            let sched = schedule_from(&schedule, &file_cfg, model_sigmas.as_deref());
            cmd_sample(
                &SampleArgs {
                    checkpoint,
                    input,
                    count,
                    out,
                    markers,
                    points,
                    seed: cli.seed,
                },
                &sched,
            )
        }
        Command::SampleConstrained {
            checkpoint,
            input,
            count,
            out,
            markers,
            points,
            region_file,
            auto_regions,
            k,
            regions,
            naive,
            schedule,
        } => {
            let region = match (region_file, auto_regions) {
                (Some(path), false) => RegionSource::File(path),
                (None, true) => RegionSource::Auto { k, count: regions },
                (None, false) => {
                    anyhow::bail!("one of --region-file or --auto-regions is required")
                }
                (Some(_), true) => unreachable!("clap conflicts_with"),
            };
            let model_sigmas = graspdiff_core::checkpoint::load_checkpoint(&checkpoint)
                .ok()
                .map(|m| m.train_sigmas);
            let sched = schedule_from(&schedule, &file_cfg, model_sigmas.as_deref());
            cmd_sample_constrained(
                &SampleConstrainedArgs {
                    base: SampleArgs {
                        checkpoint,
                        input,
                        count,
                        out,
                        markers,
                        points,
                        seed: cli.seed,
                    },
                    region,
                    naive_baseline: naive,
                },
                &sched,
            )
        }
        Command::Eval {
            grasps,
            mesh,
            region,
            out,
            csv,
            delta,
            friction,
            fc_eps,
            fc_delta,
            points,
        } => {
            let gripper = resolve_gripper(file_cfg.gripper.as_ref());
            let mut args = EvalArgs {
                grasps,
                mesh,
                region,
                out,
                csv,
                delta,
                friction,
                fc_eps,
                fc_delta,
                points,
                seed: cli.seed,
            };
            if let Some(e) = &file_cfg.eval {
                if let Some(v) = e.friction {
                    args.friction = v;
                }
                if let Some(v) = e.fc_eps {
                    args.fc_eps = v;
                }
                if let Some(v) = e.fc_delta {
                    args.fc_delta = v;
                }
            }
            cmd_eval(&args, &gripper)
        }
        Command::Reconstruct {
            checkpoint,
            input,
            out,
            grid,
            points,
        } => {
            let model_sigmas = graspdiff_core::checkpoint::load_checkpoint(&checkpoint)
                .ok()
                .map(|m| m.train_sigmas);
            let sched = schedule_from(&ScheduleFlags {
                levels: None,
                sigma_max: None,
                sigma_min: None,
                eta: None,
                steps_per_level: None,
            }, &file_cfg, model_sigmas.as_deref());
            cmd_reconstruct(
                &ReconstructArgs {
                    checkpoint,
                    input,
                    out,
                    grid,
                    points,
                    seed: cli.seed,
                },
                &sched,
            )
        }
    }
}
