//! The `polytax` command line.
//!
//! Exit codes: 0 on success, 1 when a verification check fails, 2 on usage,
//! I/O or data errors. Output is plain `key: value` lines.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{manifest_header, MANIFEST};

#[derive(Debug, Parser)]
#[command(
    name = "polytax",
    version,
    about = "Polynomial blocks: certification, counting and training"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// File of `key = value` lines used as defaults for the command's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an invariant suite and print one line per check.
    Verify(VerifyArgs),
    /// Print the exact trainable parameter count of an architecture.
    CountParams(CountArgs),
    /// Write a dataset file: synthetic, per-class subsample or long-tailed resample.
    MakeDataset(MakeDatasetArgs),
    /// Train an architecture and write per-run CSV reports and checkpoints.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Aggregate a run directory into one CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// degree | oracle | grad | se-identity | fold | structure | all
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Builtin name or descriptor file.
    #[arg(long)]
    pub arch: String,
}

#[derive(Debug, Args)]
#[group(skip)]
#[command(group(clap::ArgGroup::new("mode").required(true).multiple(false)))]
pub struct MakeDatasetArgs {
    /// Synthetic quadratic task: dimension, samples per class, seed.
    #[arg(long, num_args = 3, value_names = ["D", "N", "SEED"], group = "mode")]
    pub synth: Option<Vec<u64>>,
    /// Keep exactly M samples of every class of --in.
    #[arg(long, value_name = "M", group = "mode")]
    pub limit: Option<usize>,
    /// Long-tailed resample of --in with this imbalance factor.
    #[arg(long, value_name = "IF", group = "mode")]
    pub longtail: Option<f64>,
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Sampler seed for --limit and --longtail.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: String,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Defaults to the training set.
    #[arg(long, value_name = "FILE")]
    pub eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Comma-separated epochs where the rate is multiplied by --gamma.
    /// Defaults to 40,60,80,100 restricted to epochs below --epochs.
    #[arg(long, value_name = "LIST")]
    pub milestones: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Seed of the first run; repeat r uses seed + r for initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// File name prefix of the run outputs; defaults to the architecture name.
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Architecture the checkpoint was trained with.
    #[arg(long)]
    pub arch: String,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_name = "DIR")]
    pub runs: PathBuf,
    /// Write the CSV here instead of standard output.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Splices `key = value` lines of a `--config` file in front of the
/// explicit flags, so that explicit flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(it.next().ok_or("--config needs a file")?);
        } else if let Some(path) = s.strip_prefix("--config=") {
            config = Some(OsString::from(path));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text =
        std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let mut injected = vec![];
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("config line {}: bad key {k:?}", i + 1));
        }
        injected.push(OsString::from(format!("--{key}")));
        injected.extend(v.split_whitespace().map(OsString::from));
    }
    // after the program name and the subcommand
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 2)
        .ok_or("missing command")?;
    rest.splice(sub..sub, injected);
    Ok(rest)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args = match expand_config(args.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}
