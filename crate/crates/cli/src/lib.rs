//! Command-line surface for the rollout evaluation pipeline.
//!
//! Data goes to files only; diagnostics go to stderr. Exit codes: 0 on
//! success, 1 on validation failure, 2 on runtime error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
pub mod config;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rollout-eval", version, about = "QA evaluation harness for world-model rollouts")]
pub struct Cli {
    /// JSON run configuration; flags and environment variables override it.
    #[arg(long, global = true, env = "ROLLOUT_EVAL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Global seed recorded in every output header (default 0).
    #[arg(long, global = true, env = "ROLLOUT_EVAL_SEED")]
    pub seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Session manifests -> clip manifest.
    Ingest(IngestArgs),
    /// Clip manifest -> QA dataset.
    BuildQa(BuildQaArgs),
    /// QA dataset + mix -> epoch plan.
    PlanMix(PlanMixArgs),
    /// Epoch plan -> prompt file.
    Assemble(AssembleArgs),
    /// QA dataset (or plan) -> predictions -> scores -> report.
    Evaluate(EvaluateArgs),
    /// Serve the ground-truth mock evaluator.
    MockServe(MockServeArgs),
    /// Human-study workflow.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// One epoch plan per configuration of a grid-search stage.
    Grid(GridArgs),
    /// Write a seeded synthetic session corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Manifest files or directories holding them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, env = "ROLLOUT_EVAL_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "ROLLOUT_EVAL_CLIP_LENGTH")]
    pub clip_length: Option<usize>,
    #[arg(long, default_value_t = rollout_eval::ingest::DEFAULT_SYNC_TOLERANCE)]
    pub sync_tolerance: usize,
    /// Accept character ids outside the default vocabulary.
    #[arg(long)]
    pub any_character: bool,
    /// Skip the existence check for frame files.
    #[arg(long)]
    pub no_check_frames: bool,
    /// Optional JSON summary of rejected sessions and dropped clips.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildQaArgs {
    #[arg(long)]
    pub clips: PathBuf,
    #[arg(long, env = "ROLLOUT_EVAL_OUT")]
    pub out: PathBuf,
    /// sampled6 | exhaustive8
    #[arg(long, env = "ROLLOUT_EVAL_MODE")]
    pub mode: Option<rollout_eval::qa::QaMode>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    /// Use the whole configured vocabulary instead of the observed labels.
    #[arg(long)]
    pub full_answer_space: bool,
    /// Also write the clip descriptions here.
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanMixArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Mix file, or `optimized` / `uniform`.
    #[arg(long, env = "ROLLOUT_EVAL_MIX")]
    pub mix: Option<String>,
    #[arg(long, env = "ROLLOUT_EVAL_BUDGET")]
    pub budget: Option<usize>,
    #[arg(long, env = "ROLLOUT_EVAL_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct PolicyArgs {
    /// first | uniform
    #[arg(long, env = "ROLLOUT_EVAL_POLICY")]
    pub policy: Option<rollout_eval::sampler::SamplingKind>,
    #[arg(long, env = "ROLLOUT_EVAL_N_FRAMES")]
    pub n_frames: Option<usize>,
    #[arg(long, env = "ROLLOUT_EVAL_CLIP_LENGTH")]
    pub clip_length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long)]
    pub patches_per_frame: Option<usize>,
    #[arg(long)]
    pub pad_to: Option<usize>,
    /// Omit answers (inference layout).
    #[arg(long)]
    pub inference: bool,
    #[arg(long, env = "ROLLOUT_EVAL_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Evaluate only the items listed in this plan.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Clip manifest used to resolve frame paths; clip-relative references
    /// are sent when absent.
    #[arg(long)]
    pub clips: Option<PathBuf>,
    #[arg(long, env = "ROLLOUT_EVAL_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, env = "ROLLOUT_EVAL_NUM_SAMPLES")]
    pub num_samples: Option<usize>,
    #[arg(long, env = "ROLLOUT_EVAL_RUNS")]
    pub runs: Option<usize>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Output directory for predictions, scores and reports.
    #[arg(long, env = "ROLLOUT_EVAL_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, env = "ROLLOUT_EVAL_EPSILON")]
    pub epsilon: Option<f64>,
    #[arg(long, env = "ROLLOUT_EVAL_PORT")]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCommand {
    /// Build annotation packets from items, predictions and clips.
    Export {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        /// JSON object mapping task (AR | CR) to reference hint strings.
        #[arg(long)]
        hints: Option<PathBuf>,
        #[arg(long, env = "ROLLOUT_EVAL_OUT")]
        out: PathBuf,
    },
    /// Serve the annotator endpoints over HTTP.
    Serve {
        #[arg(long)]
        packets: PathBuf,
        /// Append-only ratings log (created when missing).
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, env = "ROLLOUT_EVAL_PORT")]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Merge rating files into a ratings log.
    Import {
        #[arg(long)]
        packets: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Study statistics from packets and ratings.
    Report {
        #[arg(long)]
        packets: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        /// model_env | model_env_task_format | task_format | model | overall
        #[arg(long, default_value = "model_env")]
        group: rollout_eval::annotation::StudyGrouping,
        #[arg(long, default_value_t = rollout_eval::annotation::DEFAULT_SIGMA)]
        sigma: f64,
        #[arg(long, default_value_t = rollout_eval::annotation::DEFAULT_CONFIDENCE)]
        confidence: f64,
        #[arg(long, env = "ROLLOUT_EVAL_OUT")]
        out: PathBuf,
        /// Also write a markdown table here.
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// task_ratio | oe_ratio | bin_mc_split
    #[arg(long)]
    pub stage: rollout_eval::sampler::GridStage,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, env = "ROLLOUT_EVAL_BUDGET")]
    pub budget: Option<usize>,
    /// Output directory; one plan per configuration plus `index.jsonl`.
    #[arg(long, env = "ROLLOUT_EVAL_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub sessions: usize,
    #[arg(long, default_value_t = 3)]
    pub clips_per_session: usize,
    #[arg(long, default_value_t = 0.0)]
    pub rollout_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub flagged_fraction: f64,
    /// Do not write placeholder frame files.
    #[arg(long)]
    pub no_frames: bool,
    #[arg(long, env = "ROLLOUT_EVAL_OUT")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> i32 {
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
