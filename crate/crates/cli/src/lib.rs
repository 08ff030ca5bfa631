//! `fewframe` command line: data generation, the four training procedures,
//! evaluation, FLOPs profiling and embedding dumps.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime failures.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fewframe_core::encoders::ModelError;
use fewframe_core::losses::Combo;
use fewframe_core::sampling::SamplerKind;
use fewframe_core::training::TrainError;

pub use commands::{dump_embeddings, embeddings_tsv};

#[derive(Debug, Parser)]
#[command(name = "fewframe", version, about = "Few-frame video classification by teacher-student distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or read) a dataset and write train/val/test splits.
    GenData(Common),
    /// Train the full-frame teacher on cross-entropy.
    TrainTeacher(Common),
    /// Train a model from scratch on sampled frames.
    TrainBaseline(BaselineArgs),
    /// Distill a trained teacher into a student that sees k frames.
    TrainStudent(StudentArgs),
    /// Train teacher and student jointly.
    TrainParallel(DistillArgs),
    /// Print GAP / mAP of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Analytic FLOPs per frame count, optionally with wall-clock timing.
    Profile(ProfileArgs),
    /// Teacher and student embeddings as TSV for external projection.
    DumpEmbeddings(DumpArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config or a manifest written by an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_combo)]
    combo: Option<Combo>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_sampler)]
    sampler: Option<SamplerKind>,
}

#[derive(Debug, Args)]
struct StudentArgs {
    #[command(flatten)]
    distill: DistillArgs,
    /// Teacher checkpoint (default: `<output.dir>/teacher.fdm`).
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset file (default: `<output.dir>/test.<ext>`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the report and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// hrnn, netvlad or nextvlad at desk size, unless a config or model says otherwise.
    #[arg(long)]
    encoder: Option<String>,
    /// Frame counts to report; repeatable.
    #[arg(long)]
    frames: Vec<usize>,
    /// Take the encoder from this checkpoint; with `--data`, also time it.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_combo(s: &str) -> Result<Combo, String> {
    s.parse()
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    s.parse()
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: e.into() }
    }

    pub fn config_msg(msg: impl fmt::Display) -> Self {
        Self { code: 2, error: anyhow::anyhow!("{msg}") }
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: e.into() }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Model(ModelError::Config(_)) => Failure::config(e),
            other => Failure::runtime(other),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Runs one command; `args` excludes the program name. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv = std::iter::once(OsString::from("fewframe")).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    use commands::*;
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::TrainBaseline(a) => train_baseline(a),
        Command::TrainStudent(a) => train_student(a),
        Command::TrainParallel(a) => train_parallel(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Profile(a) => profile(a),
        Command::DumpEmbeddings(a) => dump(a),
    }
}
