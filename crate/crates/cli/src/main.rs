//! Command-line orchestration of the five pipeline steps: bank training,
//! template generation, inversion, mask extraction, and fusion, plus the
//! evaluation and ablation harness.
//!
//! Exit codes: 0 success, 2 validation/config errors, 3 template filtering
//! exhausted, 4 numerical failure.

mod commands;

use clap::{Parser, Subcommand};
use conceptfuse::error::CoreError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "conceptfuse", version, about = "toy multi-concept diffusion fusion pipeline")]
struct Cli {
    /// TOML configuration file; omitted means all defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed for the command (overrides the per-command default).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections (1 = sequential).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Output directory (overrides paths.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base denoiser on generated toy scenes.
    TrainBase,
    /// Fine-tune one concept (or every registry concept) into the bank.
    TrainConcept {
        /// Concept id; omitted trains every concept in the registry.
        #[arg(long)]
        id: Option<String>,
    },
    /// Generate a filtered template image for the configured prompt.
    GenTemplate,
    /// DDIM-invert a template and cache its structural features.
    Invert {
        /// Template PNG; defaults to the last generated template.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Extract, filter, and persist concept masks for a template.
    Mask {
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Full fusion: template retry loop, inversion, masks, fusion sampling.
    Fuse,
    /// Train/load the probe and score fused generations (full config only).
    Eval,
    /// Run every ablation mode and report the ordering with bootstrap CIs.
    Ablate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = run(&cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err.downcast_ref::<CoreError>() {
                Some(CoreError::FilterExhausted(_)) => 3,
                Some(CoreError::Numerical(_)) => 4,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut ctx = commands::Ctx::load(cli.config.as_deref(), cli.out.as_deref(), cli.jobs)?;
    match &cli.command {
        Command::TrainBase => commands::train_base(&ctx, cli.seed.unwrap_or(1)),
        Command::TrainConcept { id } => {
            commands::train_concept(&ctx, id.as_deref(), cli.seed.unwrap_or(2))
        }
        Command::GenTemplate => commands::gen_template(&ctx, cli.seed.unwrap_or(3)),
        Command::Invert { template } => {
            commands::invert(&ctx, template.as_deref(), cli.seed.unwrap_or(4))
        }
        Command::Mask { template } => {
            commands::mask(&ctx, template.as_deref(), cli.seed.unwrap_or(5))
        }
        Command::Fuse => commands::fuse(&ctx, cli.seed.unwrap_or(6)),
        Command::Eval => commands::eval(&mut ctx, cli.seed.unwrap_or(7), false),
        Command::Ablate => commands::eval(&mut ctx, cli.seed.unwrap_or(8), true),
    }
}
