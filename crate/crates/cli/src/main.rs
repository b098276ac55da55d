//! Command-line front end: scene generation, training, evaluation, the
//! ablation matrix, the gradient-check suite, and tensor snapshot stats.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qfuse_core::config::{AblationAxis, RunConfig};
use qfuse_core::experiment;
use qfuse_core::snapshot;
use qfuse_core::Error;

#[derive(Parser)]
#[command(name = "qfuse", version, about = "Quaternion-space camera/LiDAR fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines with [section] headers)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with a single seed
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate/train with zero-initialized LiDAR inputs
    #[arg(long)]
    no_lidar: bool,
    /// Fusion mode override (camera_only|progressive|input_summation|deep_summation|separate)
    #[arg(long)]
    mode: Option<String>,
    /// Output directory for artifacts
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if self.no_lidar {
            cfg.lidar_present = false;
        }
        if let Some(mode) = &self.mode {
            cfg.set("fusion_mode", mode)?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scene directories (image.ppm, cloud.qfpc, cam.txt, gt.csv)
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Number of scenes to generate
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train one model per seed; writes checkpoints and metrics.csv
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out scene set
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file produced by `train`
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run an ablation axis; writes one CSV row per (variant, seed)
    Ablate {
        #[command(flatten)]
        common: Common,
        /// components|framework|quaternion_axis|quafa_depth|dims|robustness
        #[arg(long)]
        axis: Option<String>,
    },
    /// Finite-difference checks for every operation and block
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Only run checks whose name contains this substring
        #[arg(long)]
        only: Option<String>,
    },
    /// Print stats of a tensor snapshot file
    Inspect {
        /// Path to a QFT1 tensor snapshot
        path: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Datagen { common, count } => {
            let cfg = common.resolve()?;
            experiment::run_datagen(&cfg, count)?;
            println!("wrote {count} scenes under {}", cfg.out_dir.display());
        }
        Command::Train { common } => {
            let cfg = common.resolve()?;
            let records = experiment::run_train(&cfg)?;
            for r in records.iter().filter(|r| r.toy_ap.is_finite()) {
                println!(
                    "seed {}: final loss {:.4}, toy_ap {:.4} ({} ms)",
                    r.seed, r.loss, r.toy_ap, r.wall_ms
                );
            }
            println!("artifacts under {}", cfg.out_dir.display());
        }
        Command::Eval { common, ckpt } => {
            let cfg = common.resolve()?;
            let ap = experiment::run_eval(&cfg, &ckpt)?;
            println!(
                "toy_ap {:.4} over {} held-out scenes (lidar_present = {})",
                ap, cfg.eval_scenes, cfg.lidar_present
            );
        }
        Command::Ablate { common, axis } => {
            let mut cfg = common.resolve()?;
            if let Some(axis) = axis {
                cfg.ablation_axis = AblationAxis::parse(&axis)?;
            }
            let (report, path) = experiment::run_ablate(&cfg)?;
            let mut variants: Vec<&str> = report.records.iter().map(|r| r.variant.as_str()).collect();
            variants.dedup();
            println!("axis {}: median toy_ap over {} seed(s)", report.axis_name, cfg.seeds.len());
            for v in variants {
                for lidar in [true, false] {
                    let aps = report.variant_aps(v, lidar);
                    if aps.is_empty() {
                        continue;
                    }
                    println!("  {:<28} lidar={:<5} median {:.4}", v, lidar, report.median_ap(v, lidar));
                }
            }
            for (variant, seed, err) in &report.failures {
                println!("  FLAGGED {variant} seed {seed}: {err}");
            }
            println!("rows written to {}", path.display());
        }
        Command::Gradcheck { common, only } => {
            let cfg = common.resolve()?;
            let seed = cfg.seeds.first().copied().unwrap_or(0);
            let items: Vec<_> = experiment::standard_checks(seed)
                .into_iter()
                .filter(|i| only.as_ref().is_none_or(|f| i.name.contains(f.as_str())))
                .collect();
            if items.is_empty() {
                return Err(Error::Config(format!("no gradcheck item matches `{}`", only.unwrap_or_default())));
            }
            let report = experiment::run_checks(&items)?;
            print!("{}", report.render());
            if !report.all_pass() {
                return Err(Error::Contract("gradient checks failed".into()));
            }
        }
        Command::Inspect { path } => {
            let t = snapshot::load_tensor(&path)?;
            let n = t.numel() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let min = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!("shape: {:?}", t.shape());
            println!("count: {}", t.numel());
            println!("min: {min:.6}  max: {max:.6}  mean: {mean:.6}  std: {:.6}", var.sqrt());
            println!("finite: {}", t.all_finite());
            let head: Vec<String> = t.data().iter().take(8).map(|v| format!("{v:.6}")).collect();
            println!("head: [{}]", head.join(", "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with 2 on usage errors
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::UnknownKey { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
