use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fvg_core::sample::{Mode, DEFAULT_CFG_SCALE, DEFAULT_STEPS};
use fvg_harness::commands::{execute, exit_code, rerun, Globals};
use fvg_harness::config::{ConfigError, RunConfig};
use fvg_harness::manifest::Command;
use fvg_harness::studies::StudyName;

#[derive(Parser)]
#[command(name = "fvg", version, about = "Factorized text-to-video generation on a toy sprite world")]
struct Cli {
    /// JSON config with sections data, model, train, sample, study.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the training set and the held-out prompts.
    GenData,
    /// Flow-matching pretraining of the text-to-video base.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train anchor-conditioning adapters on top of a frozen base.
    FinetuneAnchor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
    },
    /// Generate one video.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lora: Option<PathBuf>,
        #[arg(long, default_value = "factorized")]
        mode: Mode,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long, default_value_t = 0)]
        anchor_seed: u64,
    },
    /// Score one mode on the held-out prompts.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lora: Option<PathBuf>,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run one of the studies.
    Study {
        name: StudyName,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lora: Option<PathBuf>,
    },
    /// Re-execute a recorded run from its run.json into --out.
    Rerun { manifest: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(ConfigError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let steps = |s: Option<usize>| s.unwrap_or(config.sample.steps);
    let command = match cli.command {
        Cmd::Rerun { manifest } => {
            let m = rerun(&manifest, &cli.out)?;
            eprintln!("run {} -> {}", m.run_id, cli.out.display());
            return Ok(());
        }
        Cmd::GenData => Command::GenData,
        Cmd::Pretrain { data } => Command::Pretrain { data },
        Cmd::FinetuneAnchor { data, base } => Command::FinetuneAnchor { data, base },
        Cmd::Sample { ckpt, lora, mode, prompt, steps: s, cfg_scale, anchor_seed } => Command::Sample {
            mode,
            ckpt,
            lora,
            prompt,
            steps: s.unwrap_or(if cli.config.is_some() { config.sample.steps } else { DEFAULT_STEPS }),
            cfg_scale: cfg_scale.unwrap_or(if cli.config.is_some() { config.sample.cfg_scale } else { DEFAULT_CFG_SCALE }),
            anchor_seed,
        },
        Cmd::Eval { data, ckpt, lora, mode, steps: s } => Command::Eval { data, ckpt, lora, mode, steps: steps(s) },
        Cmd::Study { name, data, ckpt, lora } => Command::Study { name, data, ckpt, lora },
    };
    let g = Globals { config, seed: cli.seed, out: cli.out };
    let m = execute(&g, command)?;
    eprintln!("run {} -> {}", m.run_id, g.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
