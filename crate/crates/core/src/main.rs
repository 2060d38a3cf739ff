use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geofuse::commands;
use geofuse::config::RunConfig;
use geofuse::world::Difficulty;

#[derive(Parser)]
#[command(
    name = "geofuse",
    about = "Geometry-guided token fusion in a synthetic waypoint-navigation harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fusion variant override (full, two_d_only, three_d_only, concat,
    /// no_geo_inject, bidirectional; eval also accepts oracle).
    #[arg(long)]
    variant: Option<String>,
    /// Pin the injection strength to a fixed value.
    #[arg(long)]
    eta: Option<f64>,
    /// Pin the fusion gate to a fixed value in (0,1).
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify analytic gradients against central differences.
    Gradcheck(Common),
    /// Train a variant; writes checkpoint.txt and train_log.tsv.
    Train(Common),
    /// Evaluate a checkpoint (or the scripted oracle) on held-out episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; omit with --variant oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate all fusion variants under shared seeds.
    Ablate(Common),
    /// Train one cell per (eta, alpha) grid point and report the grid.
    Sweep(Common),
    /// Emit per-token response maps of the fusion stages.
    DumpResponses {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long, default_value = "easy")]
        difficulty: String,
    },
    /// Recompute a metrics report from saved episode files.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Episode files to aggregate.
        #[arg(long, required = true, num_args = 1..)]
        episodes: Vec<PathBuf>,
    },
}

fn build_config(common: &Common) -> geofuse::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(variant) = &common.variant {
        cfg.variant = variant.clone();
    }
    if let Some(eta) = common.eta {
        cfg.eta = Some(eta);
    }
    if let Some(alpha) = common.alpha {
        cfg.alpha = Some(alpha);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> geofuse::Result<ExitCode> {
    match Cli::parse().command {
        Command::Gradcheck(common) => {
            let cfg = build_config(&common)?;
            let report = commands::cmd_gradcheck(&cfg)?;
            print!("{}", report.to_text());
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Train(common) => {
            let cfg = build_config(&common)?;
            let out = commands::cmd_train(&cfg)?;
            if let Some(last) = out.log.iter().rev().find(|r| r.split == "val") {
                eprintln!(
                    "train: final val loss {:.4}, NE {:.2} m, SR {:.2}%",
                    last.loss,
                    last.ne.unwrap_or(f64::NAN),
                    last.sr.unwrap_or(f64::NAN)
                );
            }
            println!(
                "checkpoint written to {}",
                cfg.out_dir.join("checkpoint.txt").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = build_config(&common)?;
            let report = commands::cmd_eval(&cfg, checkpoint.as_deref())?;
            print!("{}", geofuse::io::report_to_text(&report));
            Ok(if report.dominance_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Ablate(common) => {
            let cfg = build_config(&common)?;
            let out = commands::cmd_ablate(&cfg)?;
            print!("{}", geofuse::io::ablation_to_text(&out.rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(common) => {
            let cfg = build_config(&common)?;
            let out = commands::cmd_sweep(&cfg)?;
            println!(
                "best cell: eta {} alpha {} (see {})",
                out.best.0,
                out.best.1,
                cfg.out_dir.join("sweep.tsv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpResponses {
            common,
            checkpoint,
            scene_seed,
            difficulty,
        } => {
            let cfg = build_config(&common)?;
            let difficulty = Difficulty::parse(&difficulty)?;
            let maps = commands::cmd_dump_responses(&cfg, &checkpoint, scene_seed, difficulty)?;
            println!(
                "wrote {} response maps to {}",
                maps.len(),
                cfg.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { common, episodes } => {
            let cfg = build_config(&common)?;
            let report = commands::cmd_metrics(&cfg, &episodes)?;
            print!("{}", geofuse::io::report_to_text(&report));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
