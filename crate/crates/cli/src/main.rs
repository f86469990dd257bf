use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use refsr_cli::commands::{self, EVAL_FILE, ROBUSTNESS_FILE};
use refsr_cli::config::{Overrides, Preset, RunConfig};
use refsr_core::Error;

#[derive(Parser)]
#[command(name = "refsr", version, about = "Reference-based x4 super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Run configuration (TOML). Defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gate strategy: full, frozen-gate, self-only or cross-only.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print a commented default configuration.
    InitConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Write synthetic HR textures as PNG files.
    SynthData {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Degrade HR images x4 and write LR images plus a manifest.
    PrepareData {
        #[arg(long)]
        hr_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the configured manifest.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// PSNR/SSIM of a checkpoint and of the bicubic baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the configured manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Correspondence error and PSNR under scaled and rotated references.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Trainable parameters per module.
    ParamCount {
        /// Ignored when --config is given.
        #[arg(long, value_enum, default_value = "paper")]
        preset: Preset,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, Error> {
    let flags = Overrides {
        seed: common.seed,
        ablation: common.ablation.clone(),
        steps: common.steps,
        out: common.out.clone(),
    };
    RunConfig::load(common.config.as_deref(), std::env::vars(), &flags)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::InitConfig { preset } => {
            print!("{}", RunConfig::preset(preset).to_commented_toml()?);
        }
        Command::SynthData { count, size, common } => {
            let cfg = resolve(&common)?;
            for p in commands::synth_data(&cfg.out, count, size, cfg.seed)? {
                println!("{}", p.display());
            }
        }
        Command::PrepareData { hr_dir, common } => {
            let cfg = resolve(&common)?;
            let m = commands::prepare_data(&cfg, &hr_dir, &cfg.out)?;
            println!("{} pairs -> {}", m.entries.len(), cfg.out.join("manifest.tsv").display());
        }
        Command::Train { resume, common } => {
            let cfg = resolve(&common)?;
            let ck = commands::train(&cfg, resume)?;
            println!("{}", ck.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            common,
        } => {
            let cfg = resolve(&common)?;
            let manifest = manifest.unwrap_or_else(|| cfg.data.manifest.clone());
            let summary = commands::eval(&checkpoint, &manifest, &cfg.metrics)?;
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join(EVAL_FILE), commands::eval_tsv(&summary))?;
            cfg.write_resolved(&cfg.out)?;
            print!("{}", commands::eval_table(&summary));
        }
        Command::Robustness {
            checkpoint,
            manifest,
            common,
        } => {
            let cfg = resolve(&common)?;
            let manifest = manifest.unwrap_or_else(|| cfg.data.manifest.clone());
            let rows = commands::robustness_cmd(&cfg, &checkpoint, &manifest)?;
            let tsv = commands::robustness_tsv(&rows);
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join(ROBUSTNESS_FILE), &tsv)?;
            cfg.write_resolved(&cfg.out)?;
            print!("{tsv}");
        }
        Command::ParamCount { preset, common } => {
            let mut cfg = if common.config.is_some() {
                resolve(&common)?
            } else {
                RunConfig::preset(preset)
            };
            if let Some(a) = &common.ablation {
                cfg.model = refsr_core::model::apply_ablation(&cfg.model, a)?;
            }
            println!("{}", commands::param_count(&cfg.model)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            match e {
                Error::Argument(_) | Error::Config { .. } | Error::UnknownName { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
