//! Command-line front end: corpus validation, dataset building, evaluation
//! and the trajectory decoder.
//!
//! Every command is reachable through [`run`], which takes the argument list
//! and the two output streams, so the binary is a thin wrapper.

mod build;
mod error;
mod eval;
mod jsonl;
mod traj;
mod validate;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rsvl_core::{ModalityLabel, TaskKind};

pub use error::{CliError, Status};

#[derive(Debug, Parser)]
#[command(
    name = "rsvl",
    version,
    about = "Build, check and score remote-sensing instruction corpora"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse every prompt and response of a record file and report markup errors.
    Validate(ValidateArgs),
    /// Turn an annotation file into instruction records.
    Build(BuildArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Unroll the trajectory decoder from a latent vector.
    Decode(DecodeArgs),
    /// Fit decoder weights to one target trajectory.
    Fit(FitArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// JSONL record file (`-` for stdin).
    pub input: PathBuf,
    /// Also re-check the counting statements of decomposition records.
    #[arg(long)]
    pub strict: bool,
    /// Print the error list as JSON on stdout.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// JSONL annotation file (`-` for stdin).
    pub annotations: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    /// Output record file; stdout when omitted.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Modality for annotations that do not name one.
    #[arg(long, value_parser = parse_modality, default_value = "opt")]
    pub modality: ModalityLabel,
    /// JSON object mapping surface words to canonical categories or shapes.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    /// Check captions against their annotation and drop the ones that fail.
    #[arg(long)]
    pub validate_captions: bool,
    /// JSON object mapping image ids to caption similarity scores.
    #[arg(long, requires = "benchmark")]
    pub scores: Option<PathBuf>,
    /// Benchmark similarity; a caption needs 80% of it.
    #[arg(long, requires = "scores")]
    pub benchmark: Option<f64>,
    /// Where rejected captions go; defaults to `<out>.rejects.jsonl`.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// Accepted for symmetry with `fit`. The builders are deterministic and
    /// never read it.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    /// JSONL predictions, one per id.
    #[arg(long)]
    pub preds: PathBuf,
    /// JSONL ground truth, one per id.
    #[arg(long)]
    pub gts: PathBuf,
    /// Success radius in scene units (navigation tasks, required there).
    #[arg(long)]
    pub success_radius: Option<f64>,
    /// IoU threshold. Detection defaults to 0.5; for relations it switches on
    /// box-gated matching.
    #[arg(long)]
    pub iou: Option<f64>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Weight file (JSON).
    #[arg(long)]
    pub weights: PathBuf,
    /// JSON array holding the latent vector.
    #[arg(long)]
    pub latent: PathBuf,
    /// Maximum number of steps.
    #[arg(short = 'T', long = "max-steps", default_value_t = 100)]
    pub max_steps: usize,
    /// Termination threshold on the distance between consecutive states.
    #[arg(short = 'p', long = "threshold", default_value_t = rsvl_core::trajdec::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// JSON array of target states, each six values in (0, 1).
    #[arg(long)]
    pub targets: PathBuf,
    /// JSON array holding the latent vector.
    #[arg(long)]
    pub latent: PathBuf,
    #[arg(long)]
    pub weights_out: PathBuf,
    /// Loss curve CSV; defaults to the weight path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long)]
    pub lr: f64,
    #[arg(long)]
    pub iters: usize,
    #[arg(long)]
    pub seed: u64,
    /// Hidden size of the recurrent cell.
    #[arg(long, default_value_t = 8)]
    pub d_h: usize,
    /// Initial weights are uniform in [-init_scale, init_scale].
    #[arg(long, default_value_t = 0.1)]
    pub init_scale: f64,
    /// Maximum decode steps; defaults to the target length.
    #[arg(short = 'T', long = "max-steps")]
    pub max_steps: Option<usize>,
    #[arg(short = 'p', long = "threshold", default_value_t = rsvl_core::trajdec::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub json: bool,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse()
}

fn parse_modality(s: &str) -> Result<ModalityLabel, String> {
    match s {
        "opt" => Ok(ModalityLabel::Opt),
        "sar" => Ok(ModalityLabel::Sar),
        "ir" => Ok(ModalityLabel::Ir),
        _ => Err(format!("unknown modality `{s}` (expected opt, sar or ir)")),
    }
}

/// Runs one command line. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Status
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = write!(err, "{}", e.render());
            return Status::Format;
        }
        Err(e) => {
            // --help and --version
            let _ = write!(out, "{}", e.render());
            return Status::Ok;
        }
    };
    let result = jsonl::thread_pool().and_then(|pool| {
        pool.install(|| match &cli.command {
            Command::Validate(a) => validate::run(a, out, err),
            Command::Build(a) => build::run(a, out, err),
            Command::Eval(a) => eval::run(a, out, err),
            Command::Decode(a) => traj::decode(a, out),
            Command::Fit(a) => traj::fit(a, out, err),
        })
    });
    match result {
        Ok(status) => status,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.status()
        }
    }
}
