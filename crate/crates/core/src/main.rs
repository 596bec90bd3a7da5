use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use flow_align::runner::{resolve_out_root, run_stage, ExperimentConfig, Preset, RunOptions, Stage};
use flow_align::{Error, Result};

/// Desk-scale flow-matching lab: pretrain, align and evaluate toy models.
#[derive(Debug, Parser)]
#[command(name = "flow-align", version)]
struct Cli {
    /// Stage to run; falls back to the config's `stage` field.
    stage: Option<Stage>,
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to the config, then $FLOW_ALIGN_OUT, then ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// Write every rollout to trajectories.jsonl (grpo, mpo).
    #[arg(long)]
    dump_trajectories: bool,
    /// Prompts for the tokenize stage, in addition to the config's.
    #[arg(long = "prompt")]
    prompts: Vec<String>,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let stage = cli
        .stage
        .or(cfg.stage)
        .ok_or_else(|| Error::Config("no stage given on the command line or in the config".into()))?;
    if cli.config.is_none() && !matches!(stage, Stage::Tokenize | Stage::Gradcheck) {
        return Err(Error::Config(format!("stage {} needs --config", stage.as_str())));
    }
    if let Some(p) = cli.preset {
        cfg.apply_preset(p);
    }
    cfg.tokenize.prompts.extend(cli.prompts);
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let opts = RunOptions {
        out_root: resolve_out_root(cli.out.as_deref(), &cfg),
        seed: cli.seed.unwrap_or(cfg.seed),
        dump_trajectories: cli.dump_trajectories,
    };
    let summary = run_stage(stage, &cfg, &opts)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flow-align: {e}");
            ExitCode::FAILURE
        }
    }
}
