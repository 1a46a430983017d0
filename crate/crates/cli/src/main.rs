//! `upgan` command-line entry point.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
//! error, 4 training error. `UPGAN_BACKEND` selects the compute backend;
//! only `cpu` (the default) is available.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use upgan::harness::{
    cmd_eval, cmd_generate_data, cmd_sweep_supervision, cmd_train, exit_code, exit_code_for, Ablation,
    ExperimentConfig, Run,
};
use upgan::Error;

#[derive(Parser)]
#[command(name = "upgan", version, about = "Uncertainty-guided progressive GAN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed overriding the configuration's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory overriding the configuration's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    NoGuidance,
}

#[derive(Subcommand)]
enum Command {
    /// Build the paired dataset and write its manifest and tensors.
    GenerateData(Common),
    /// Train the cascade progressively.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and emit a report with figures.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for a paired significance comparison.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train and evaluate at several supervision levels.
    SweepSupervision {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subject counts overriding `sweep.levels`.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<usize>>,
    },
}

fn run(cli: Cli) -> upgan::Result<()> {
    match std::env::var("UPGAN_BACKEND") {
        Ok(b) if b != "cpu" => return Err(Error::Config(format!("unsupported UPGAN_BACKEND {b:?}; only \"cpu\" is available"))),
        _ => {}
    }
    let prepare = |c: &Common| Run::new(ExperimentConfig::load(&c.config)?, c.seed, c.out.clone());
    let print = |v: serde_json::Value| println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
    match cli.command {
        Command::GenerateData(c) => {
            let path = cmd_generate_data(&prepare(&c)?)?;
            print(serde_json::json!({ "manifest": path }));
        }
        Command::Train { common, ablation, resume } => {
            let ablation = ablation.map(|AblationArg::NoGuidance| Ablation::NoGuidance);
            let summary = cmd_train(&prepare(&common)?, ablation, resume.as_deref())?;
            print(serde_json::to_value(summary)?);
        }
        Command::Eval { common, checkpoint, compare } => {
            let run = prepare(&common)?;
            let report = cmd_eval(&run, &checkpoint, compare.as_deref())?;
            print(serde_json::json!({
                "report": run.out.join("report.json"),
                "mae": report.mae,
                "ssim": report.ssim,
                "psnr": report.psnr,
                "mean_uncertainty": report.per_phase.iter().map(|p| p.mean_uncertainty).collect::<Vec<_>>(),
                "comparisons": report.comparisons,
            }));
        }
        Command::SweepSupervision { common, levels } => {
            let report = cmd_sweep_supervision(&prepare(&common)?, levels.as_deref())?;
            print(serde_json::to_value(&report.levels)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit_code::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
