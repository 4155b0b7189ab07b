//! `kelab`: run the knowledge-editing pipeline or any single stage of it.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kelab::base::{decide, predict};
use kelab::editor::edit_with_loop;
use kelab::experiment::{ExperimentConfig, Run, Stage, Variant};

#[derive(Parser)]
#[command(name = "kelab", version, about = "Learned knowledge editing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Smoke,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Parent directory of the hash-named run directory; falls back to the
    /// configured `out_dir`, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset configuration as JSON.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Generate the synthetic fact world and dataset.
    GenData(Common),
    /// Train the base classifier.
    TrainBase(Common),
    /// Build edit requests for every split.
    BuildRequests(Common),
    /// Train the editor variants.
    TrainEditor {
        #[command(flatten)]
        common: Common,
        /// Train a single variant (kl, kl_px, l2); all by default.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Apply a trained editor to one test request and print the outcome.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "kl")]
        variant: String,
        /// Index into the test requests.
        #[arg(long, default_value_t = 0)]
        request: usize,
        /// Maximum editor applications.
        #[arg(long = "loop", default_value_t = 1)]
        max_iter: usize,
    },
    /// Evaluate every method and write per-method reports.
    Evaluate(Common),
    /// Pairwise Dirichlet comparison of the evaluated methods.
    Compare(Common),
    /// Update magnitudes and cosine similarities.
    Analyze(Common),
    /// Full pipeline, or the stages from `--stage` onward.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: Option<String>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&s).with_context(|| format!("parsing {}", p.display()))?
        }
        None => preset(c.preset),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn preset(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Desk => ExperimentConfig::desk(),
        Preset::Smoke => ExperimentConfig::smoke(),
    }
}

fn open(c: &Common) -> Result<Run> {
    let cfg = load_config(c)?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let run = Run::create(cfg, &out)?;
    log::info!("run directory {}", run.dir.display());
    Ok(run)
}

fn stage(c: &Common, s: Stage) -> Result<()> {
    let run = open(c)?;
    run.run_stage(s)?;
    println!("{}", run.dir.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { preset: p } => {
            println!("{}", preset(p).canonical_json()?);
            Ok(())
        }
        Command::GenData(c) => stage(&c, Stage::GenData),
        Command::TrainBase(c) => stage(&c, Stage::TrainBase),
        Command::BuildRequests(c) => stage(&c, Stage::BuildRequests),
        Command::TrainEditor { common, variant: None } => stage(&common, Stage::TrainEditor),
        Command::TrainEditor { common, variant: Some(v) } => {
            let run = open(&common)?;
            let v: Variant = v.parse()?;
            run.train_editor(v).map_err(|e| kelab::Error::Stage {
                stage: Stage::TrainEditor.name().into(),
                source: Box::new(e),
            })?;
            println!("{}", run.dir.display());
            Ok(())
        }
        Command::Edit { common, variant, request, max_iter } => {
            let run = open(&common)?;
            let phi = run.editor(variant.parse()?)?;
            let theta = run.base()?;
            let reqs = run.requests()?;
            let Some(r) = reqs.test.get(request) else {
                bail!("request {request} out of range ({} test requests)", reqs.test.len());
            };
            let (edited, iterations) = edit_with_loop(&phi, &theta, r, max_iter)?;
            let after = decide(&predict(&edited, &r.x)?);
            let out = serde_json::json!({
                "request": r.id,
                "x": r.x,
                "y": r.y,
                "a": r.a,
                "prediction_after": after,
                "success": after == r.a,
                "iterations": iterations,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(())
        }
        Command::Evaluate(c) => stage(&c, Stage::Evaluate),
        Command::Compare(c) => stage(&c, Stage::Compare),
        Command::Analyze(c) => stage(&c, Stage::Analyze),
        Command::Run { common, stage: from } => {
            let run = open(&common)?;
            let start = match from {
                Some(s) => s.parse::<Stage>()?,
                None => Stage::GenData,
            };
            for s in Stage::ALL.into_iter().skip_while(|&s| s != start) {
                run.run_stage(s)?;
            }
            println!("{}", run.dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut shown = e.to_string();
            eprintln!("error: {shown}");
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !shown.contains(&c) {
                    eprintln!("  caused by: {c}");
                    shown = c;
                }
            }
            ExitCode::FAILURE
        }
    }
}
