//! `lcrank` command line.

mod commands;
pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::ranker::{LrSchedule, ModelConfig, RankerError};
use crate::search::SearchError;
use crate::termination::TerminationError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let m = e.to_string();
        match e {
            CorpusError::Io(_)
            | CorpusError::Malformed { .. }
            | CorpusError::UnknownSchemaVersion { .. }
            | CorpusError::DuplicateRunId(_)
            | CorpusError::InvalidRecord { .. }
            | CorpusError::Empty => CliError::Io(m),
            _ => CliError::Usage(m),
        }
    }
}

impl From<RankerError> for CliError {
    fn from(e: RankerError) -> Self {
        let m = e.to_string();
        match e {
            RankerError::Diverged { .. } | RankerError::Tensor(_) => CliError::Numeric(m),
            RankerError::Io(_) | RankerError::Checkpoint(_) => CliError::Io(m),
            RankerError::Corpus(c) => c.into(),
            _ => CliError::Usage(m),
        }
    }
}

impl From<TerminationError> for CliError {
    fn from(e: TerminationError) -> Self {
        match e {
            TerminationError::InvalidPolicy(m) => CliError::Usage(format!("invalid policy: {m}")),
            TerminationError::Ranker(r) => r.into(),
            TerminationError::Corpus(c) => c.into(),
            TerminationError::Csv(c) => c.into(),
            TerminationError::Io(i) => i.into(),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        let m = e.to_string();
        match e {
            SearchError::UndefinedCorrelation | SearchError::LengthMismatch(..) => CliError::Numeric(m),
            SearchError::InsufficientRuns { .. } | SearchError::Config(_) => CliError::Usage(m),
            SearchError::Termination(t) => t.into(),
            SearchError::Ranker(r) => r.into(),
            SearchError::Corpus(c) => c.into(),
            SearchError::Csv(c) => c.into(),
            SearchError::Io(i) => i.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lcrank", version, about = "Learning-curve ranking for early termination")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Train a bank of rankers on the datasets other than the holdout.
    Train(TrainArgs),
    /// Ranking protocol: correlation of partial-curve ranks with final ranks.
    Rank(RankArgs),
    /// Replay random search under termination policies.
    Simulate(SimulateArgs),
    /// Regularized evolution over a dataset used as a lookup table.
    Optimize(OptimizeArgs),
    /// Charts and a summary table from result CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ConfigArg {
    /// File of `key = value` lines; flags given on the command line win.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub datasets: usize,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    pub noise: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

/// Overrides applied on top of a command's base model configuration.
#[derive(Debug, Args, Serialize, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `constant` or `cosine`.
    #[arg(long, value_parser = parse_schedule)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    pub rec_batch: Option<usize>,
    /// Weight of the ranking loss against reconstruction.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the final-performance head loss.
    #[arg(long)]
    pub perf_weight: Option<f64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
}

fn parse_schedule(s: &str) -> std::result::Result<LrSchedule, String> {
    match s {
        "constant" => Ok(LrSchedule::Constant),
        "cosine" => Ok(LrSchedule::Cosine),
        _ => Err(format!("unknown schedule {s:?} (constant, cosine)")),
    }
}

impl ModelArgs {
    pub fn apply(&self, mut cfg: ModelConfig) -> Result<ModelConfig> {
        let t = &mut cfg.training;
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.pairs {
            t.pairs_per_step = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.lr_schedule {
            t.lr_schedule = v;
        }
        if let Some(v) = self.rec_batch {
            t.reconstruction_batch = v;
        }
        if let Some(v) = self.model_seed {
            t.seed = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.perf_weight {
            cfg.perf_head_weight = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub holdout: String,
    /// Comma list of curve lengths, or `cadence:K` for K, 2K, ... below the
    /// holdout curve length.
    #[arg(long, default_value = "cadence:3")]
    pub lengths: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct RankArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub holdout: String,
    /// Comma list of lcranknet, last-value, oracle, constant, random.
    #[arg(long, default_value = "lcranknet,last-value")]
    pub scorers: String,
    #[arg(long, default_value_t = 10)]
    pub repetitions: usize,
    /// Comma list of observed fractions of the curve length.
    #[arg(long, default_value = "0,0.03,0.06,0.09,0.12,0.15,0.18,0.21,0.24,0.27,0.3")]
    pub fractions: String,
    #[arg(long, default_value_t = 50)]
    pub test_runs: usize,
    #[arg(long, default_value_t = 5)]
    pub train_runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PolicyArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long, default_value_t = crate::termination::DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = crate::termination::DEFAULT_CADENCE)]
    pub cadence: usize,
    /// `truncated` or `full`.
    #[arg(long, default_value = "truncated")]
    pub incumbent: String,
    /// Margin of the last-value rule.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub holdout: String,
    /// Comma list of none, lcranknet, last-value, sh, hyperband.
    #[arg(long, alias = "policy", default_value = "none,lcranknet,last-value,sh,hyperband")]
    pub policies: String,
    /// Number of order seeds, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub policy: PolicyArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for one decision trace CSV per policy and seed.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct OptimizeArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub holdout: String,
    /// One of none, lcranknet, last-value.
    #[arg(long, default_value = "lcranknet")]
    pub policy: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub policy_args: PolicyArgs,
    #[arg(long, default_value_t = 10)]
    pub population: usize,
    #[arg(long, default_value_t = 3)]
    pub tournament: usize,
    #[arg(long, default_value_t = 0.1)]
    pub mutation_rate: f64,
    #[arg(long, default_value_t = 100)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Incumbent trajectory CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
    /// Comma list of result CSVs.
    #[arg(long)]
    pub input: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl Command {
    fn config_file(&self) -> Option<&Path> {
        let c = match self {
            Command::GenCorpus(a) => &a.config,
            Command::Train(a) => &a.config,
            Command::Rank(a) => &a.config,
            Command::Simulate(a) => &a.config,
            Command::Optimize(a) => &a.config,
            Command::Report(a) => &a.config,
        };
        c.config.as_deref()
    }

    /// `key = value` lines describing every resolved option.
    pub fn resolved(&self) -> Vec<String> {
        let value = serde_json::to_value(self).unwrap_or(serde_json::Value::Null);
        let mut out = Vec::new();
        if let serde_json::Value::Object(map) = value {
            for (name, args) in map {
                out.push(format!("command = {name}"));
                if let serde_json::Value::Object(fields) = args {
                    for (k, v) in fields {
                        if v.is_null() {
                            continue;
                        }
                        let v = match v {
                            serde_json::Value::String(s) => s,
                            v => v.to_string(),
                        };
                        out.push(format!("{} = {v}", k.replace('_', "-")));
                    }
                }
            }
        }
        out
    }
}

/// Parses a `key = value` config file into `--key value` arguments.
pub fn config_file_args(text: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key = value", n + 1)));
        };
        let k = k.trim().replace('_', "-");
        if k.is_empty() || k == "config" {
            return Err(CliError::Usage(format!("config line {}: invalid key {k:?}", n + 1)));
        }
        out.push(format!("--{k}").into());
        out.push(v.trim().into());
    }
    Ok(out)
}

fn parse(args: &[OsString]) -> std::result::Result<Cli, clap::Error> {
    Cli::try_parse_from(args)
}

/// Parses `args` (including the program name), overlaying a config file
/// when one is given.
pub fn parse_args(args: Vec<OsString>) -> std::result::Result<Cli, ParseFailure> {
    let cli = parse(&args).map_err(ParseFailure::Clap)?;
    let Some(path) = cli.command.config_file() else {
        return Ok(cli);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| ParseFailure::Cli(CliError::Io(format!("{}: {e}", path.display()))))?;
    let extra = config_file_args(&text).map_err(ParseFailure::Cli)?;
    let mut merged = args[..2].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[2..]);
    parse(&merged).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Cli(CliError),
}

pub fn execute(cli: &Cli) -> Result<()> {
    for line in cli.command.resolved() {
        eprintln!("# {line}");
    }
    match &cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Train(a) => commands::train(a),
        Command::Rank(a) => commands::rank(a, &cli.command),
        Command::Simulate(a) => commands::simulate(a, &cli.command),
        Command::Optimize(a) => commands::optimize(a, &cli.command),
        Command::Report(a) => commands::report(a),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse_args(args) {
        Ok(c) => c,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
        Err(ParseFailure::Cli(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<OsString> {
        s.split_whitespace().map(OsString::from).collect()
    }

    #[test]
    fn config_file_lines() {
        let a = config_file_args("# c\nruns = 7\n\nnoise_sd=0.1\n").unwrap();
        assert_eq!(a, argv("--runs 7 --noise-sd 0.1"));
        assert!(config_file_args("runs 7").is_err());
        assert!(config_file_args("config = x").is_err());
    }

    #[test]
    fn command_line_beats_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.txt");
        fs::write(&f, "runs = 7\nseed = 3\n").unwrap();
        let cmd = format!("lcrank gen-corpus --out x --config {} --seed 9", f.display());
        let Command::GenCorpus(a) = parse_args(argv(&cmd)).unwrap().command else {
            panic!()
        };
        assert_eq!((a.runs, a.seed, a.epochs), (7, 9, 100));
    }

    #[test]
    fn resolved_lists_every_option() {
        let cli = parse_args(argv("lcrank train --corpus c --holdout d --out-dir o --lr 0.5")).unwrap();
        let lines = cli.command.resolved();
        assert_eq!(lines[0], "command = train");
        assert!(lines.contains(&"lengths = cadence:3".to_string()));
        assert!(lines.contains(&"lr = 0.5".to_string()));
        assert!(!lines.iter().any(|l| l.starts_with("steps")));
    }

    #[test]
    fn model_overrides() {
        let m = ModelArgs {
            steps: Some(5),
            lr_schedule: Some(LrSchedule::Cosine),
            ..ModelArgs::default()
        };
        let cfg = m.apply(ModelConfig::default()).unwrap();
        assert_eq!(cfg.training.steps, 5);
        assert_eq!(cfg.training.lr_schedule, LrSchedule::Cosine);
        let bad = ModelArgs {
            alpha: Some(2.0),
            ..ModelArgs::default()
        };
        assert_eq!(bad.apply(ModelConfig::default()).unwrap_err().exit_code(), EXIT_USAGE);
    }
}
