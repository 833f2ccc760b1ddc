//! `motionrag`: the two-stage dance synthesis pipeline as one binary.
//!
//! Stage 1 (`build-graph`, `prune`, `train-contrastive`, `generate`)
//! produces `motion_mg`; stage 2 (`train-diffusion`, `refine`) turns it into
//! `motion_diff`. `evaluate` scores any generated motion.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "motionrag", version, about = "Music-driven dance synthesis pipeline")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// TOML settings file; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every stage (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled synthetic corpus.
    SynthCorpus(SynthArgs),
    /// Build the motion graph over corpus windows.
    BuildGraph(BuildGraphArgs),
    /// Keep the largest strongly connected component.
    Prune(PruneArgs),
    /// Train the music/motion embedding.
    TrainContrastive(TrainContrastiveArgs),
    /// Walk the graph to produce `motion_mg` (stage 1).
    Generate(GenerateArgs),
    /// Train the refinement denoiser.
    TrainDiffusion(TrainDiffusionArgs),
    /// Refine `motion_mg` into `motion_diff` (stage 2).
    Refine(RefineArgs),
    /// Score generated motions.
    Evaluate(EvaluateArgs),
    /// Summarize a graph or corpus.
    Stats(StatsArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clips: Option<usize>,
}

#[derive(Args)]
pub struct BuildGraphArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frames averaged for the adaptive thresholds.
    #[arg(long)]
    pub n_mean_frames: Option<usize>,
    /// Joints that must pass for an edge.
    #[arg(long)]
    pub min_joints: Option<usize>,
    /// Compare root-relative instead of world positions.
    #[arg(long)]
    pub root_relative: bool,
}

#[derive(Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the prune report and pruned graph statistics.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainContrastiveArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// CSV of the loss before training and after every epoch.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Music feature file, one row per segment.
    #[arg(long)]
    pub music: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON trace of the node walk and seam measurements.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub blend: Option<usize>,
    /// Plan the walk with a beam of this width instead of greedily.
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Args)]
pub struct TrainDiffusionArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub contrastive: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// CSV of per-epoch loss components.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub diffusion: PathBuf,
    #[arg(long)]
    pub motion: PathBuf,
    #[arg(long)]
    pub music: PathBuf,
    #[arg(long)]
    pub beats: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub contrastive: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Reference corpus for the Fréchet distances.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Generated motion files (repeatable).
    #[arg(long, required = true)]
    pub motion: Vec<PathBuf>,
    /// Music beats the motions were generated for.
    #[arg(long)]
    pub beats: PathBuf,
    /// Generation traces whose seams are summarized (repeatable).
    #[arg(long)]
    pub trace: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

fn run(cli: Cli) -> motionrag_core::Result<Value> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::SynthCorpus(a) => commands::synth_corpus(&a, cfg),
        Command::BuildGraph(a) => commands::build_graph(&a, cfg),
        Command::Prune(a) => commands::prune(&a),
        Command::TrainContrastive(a) => commands::train_contrastive(&a, cfg),
        Command::Generate(a) => commands::generate(&a, cfg),
        Command::TrainDiffusion(a) => commands::train_diffusion(&a, cfg, cli.json),
        Command::Refine(a) => commands::refine(&a, cfg),
        Command::Evaluate(a) => commands::evaluate(&a, cfg),
        Command::Stats(a) => commands::stats(&a),
    }
}

fn print_human(v: &Value) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                match v {
                    Value::String(s) => println!("{k}: {s}"),
                    other => println!("{k}: {other}"),
                }
            }
        }
        other => println!("{other}"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(v) => {
            if json {
                println!("{v}");
            } else {
                print_human(&v);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            if json {
                println!("{}", serde_json::json!({ "error": e.to_string(), "exit_code": code }));
            }
            eprintln!("error: {e}");
            ExitCode::from(code as u8)
        }
    }
}
