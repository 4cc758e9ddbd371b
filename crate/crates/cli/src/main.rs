use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adst_core::config::RunConfig;
use adst_core::pipeline::{self, AnimateRequest, RunLayout};
use adst_core::Error;
use clap::{Parser, Subcommand};

/// Flags handled by clap; any other `--key=value` is a configuration override.
const OWN_FLAGS: &[&str] = &["config", "seed", "out", "checkpoint", "isp", "neutral", "frames", "image", "help", "version"];

#[derive(Debug, Parser)]
#[command(name = "adst", version, about = "Audio-driven talking-head synthesis with speaking-style transfer")]
#[command(after_help = "Any other --key=value flag overrides the configuration key of that name.\n\
The ADST_CACHE environment variable names a directory for cached speech features.")]
struct Cli {
    /// Run configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for training stages; output directory for animate and evaluate.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic training set and the transfer clip.
    SynthData,
    /// Train the speech representation.
    TrainApc,
    /// Train the motion generator and pre-train the style network.
    TrainMotion,
    /// Train the style-mapping networks and the image generator.
    TrainGenerator,
    /// Build the intermediate style pattern images from the transfer clip.
    BuildIsp {
        /// Source portrait; the canonical identity when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Fine-tune the motion generator toward the transfer clip's style.
    Transfer,
    /// Audio plus one portrait to a PNG frame sequence and a landmark file.
    Animate {
        audio: PathBuf,
        image: PathBuf,
        /// Checkpoint directory; `<run>/models` when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory holding isp_0.png..isp_3.png; `<run>/isp` when omitted.
        #[arg(long)]
        isp: Option<PathBuf>,
        /// Landmark file whose first frame is the neutral face of the portrait.
        #[arg(long)]
        neutral: Option<PathBuf>,
    },
    /// Compare two landmark files and write the metric report.
    Evaluate {
        reference: PathBuf,
        generated: PathBuf,
        /// Directory of generated PNG frames for the sharpness score.
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Run every stage on the synthetic data in one go.
    Smoke,
}

/// Splits `--key=value` overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((key, value)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if !OWN_FLAGS.contains(&key) {
                overrides.push((key.replace('-', "_"), value.to_string()));
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> adst_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(path: &Path, json: &str) -> adst_core::Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, json).map_err(io)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> adst_core::Result<()> {
    let cfg = load_config(&cli, overrides)?;
    let mut layout = RunLayout::new(cli.out.clone().unwrap_or_else(|| PathBuf::from("adst-run")));
    if let Some(cache) = std::env::var_os("ADST_CACHE").filter(|v| !v.is_empty()) {
        layout = layout.with_feature_cache(PathBuf::from(cache));
    }
    let summarize = |stage: &str, losses: &[f64]| match losses.last() {
        Some(last) => log::info!("{stage}: {} steps, final loss {last:.6}", losses.len()),
        None => log::info!("{stage}: no steps"),
    };
    match &cli.command {
        Command::SynthData => pipeline::stage_synth_data(&cfg, &layout)?,
        Command::TrainApc => summarize("train-apc", &pipeline::stage_train_apc(&cfg, &layout)?),
        Command::TrainMotion => summarize("train-motion", &pipeline::stage_train_motion(&cfg, &layout)?),
        Command::TrainGenerator => summarize("train-generator", &pipeline::stage_train_generator(&cfg, &layout)?),
        Command::BuildIsp { image } => {
            let refs = pipeline::stage_build_isp(&cfg, &layout, image.as_deref())?;
            log::info!("style references at frames {refs:?}");
        }
        Command::Transfer => summarize("transfer", &pipeline::stage_transfer(&cfg, &layout)?),
        Command::Animate { audio, image, checkpoint, isp, neutral } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("animation"));
            let frames = pipeline::stage_animate(
                &cfg,
                &layout,
                &AnimateRequest {
                    audio,
                    image,
                    checkpoints: checkpoint.as_deref(),
                    isp: isp.as_deref(),
                    neutral: neutral.as_deref(),
                    out: &out,
                },
            )?;
            log::info!("wrote {} frames to {}", frames.len(), out.display());
        }
        Command::Evaluate { reference, generated, frames } => {
            let report = pipeline::stage_evaluate(&cfg, reference, generated, frames.as_deref())?;
            let json = serde_json::to_string_pretty(&report).expect("metric reports serialize");
            if let Some(dir) = &cli.out {
                write_report(&dir.join("report.json"), &json)?;
            }
            println!("{json}");
        }
        Command::Smoke => {
            let summary = pipeline::run_smoke(&cfg, layout.root())?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summaries serialize"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
