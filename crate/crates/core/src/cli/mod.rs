//! Command-line front end. Every command reads the run config, works inside
//! the output directory, writes `resolved_config.json` plus its reports, and
//! appends one timestamped line to `run.log`.
//!
//! Exit codes: 0 success, 1 failed `--assert` or invalid dump, 2 usage,
//! configuration or runtime error.

mod commands;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::activation_io::write_atomic;
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "probekit", version, about = "Attribute text to training sub-datasets from MHA activations")]
pub struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Fail with exit code 1 unless a report metric passes the threshold.
    #[arg(long = "assert", global = true, value_name = "METRIC=THRESHOLD")]
    pub asserts: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and write activation dumps and manifests.
    Gen,
    /// Write extracted k-token representations for both splits.
    Extract,
    /// Train the contribution probe on the training split.
    TrainProbe,
    /// Evaluate the probe on the test split.
    EvalProbe {
        /// Also retrain and evaluate at each of these k values.
        #[arg(long, value_delimiter = ',', value_name = "K,K,..")]
        k_sweep: Vec<usize>,
    },
    /// Score synthetic multi-class mixtures against their true ratios.
    Mixture,
    /// Train the non-copyrighted response filter.
    TrainFilter,
    /// Evaluate the filter on the test split, held-out classes included.
    EvalFilter,
    /// Score extraction strategies with the K_IB metric.
    Kib {
        /// Add a selection of pure-noise tokens as a reference row.
        #[arg(long)]
        with_noise: bool,
    },
    /// Covariance propagation and MHA/FFN precision diagonality checks.
    Causality,
    /// Validate dump files, or a whole manifest with `--manifest`.
    ValidateDump {
        files: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory the manifest's dump filenames are relative to.
        #[arg(long)]
        dumps: Option<PathBuf>,
    },
}

/// Outcome of a command that did not hit an error.
pub(crate) enum Outcome {
    Report(serde_json::Value),
    Invalid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Direction {
    AtLeast,
    AtMost,
}

#[derive(Debug, Clone, PartialEq)]
struct Assertion {
    metric: String,
    threshold: f64,
    direction: Direction,
}

/// Metrics where smaller is better are asserted as upper bounds.
fn direction_of(metric: &str) -> Direction {
    let lower = ["mse", "fpr", "error", "loss"];
    if lower.iter().any(|m| metric.contains(m)) {
        Direction::AtMost
    } else {
        Direction::AtLeast
    }
}

fn parse_assertion(text: &str) -> Result<Assertion> {
    let (metric, value) = text
        .split_once('=')
        .ok_or_else(|| Error::Input(format!("--assert expects METRIC=THRESHOLD, got {text:?}")))?;
    let threshold: f64 = value
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("--assert threshold {value:?} is not a number")))?;
    let metric = metric.trim().to_string();
    Ok(Assertion {
        direction: direction_of(&metric),
        metric,
        threshold,
    })
}

/// Looks up a metric by top-level key or dotted path.
fn lookup(report: &serde_json::Value, metric: &str) -> Option<f64> {
    let mut v = report;
    for part in metric.split('.') {
        v = match v {
            serde_json::Value::Array(items) => items.get(part.parse::<usize>().ok()?)?,
            other => other.get(part)?,
        };
    }
    v.as_f64()
}

fn check_assertions(report: &serde_json::Value, asserts: &[Assertion]) -> Result<Vec<String>> {
    let mut failures = Vec::new();
    for a in asserts {
        let value = lookup(report, &a.metric)
            .ok_or_else(|| Error::Input(format!("report has no numeric metric {:?}", a.metric)))?;
        let ok = match a.direction {
            Direction::AtLeast => value >= a.threshold,
            Direction::AtMost => value <= a.threshold,
        };
        if !ok {
            let op = if a.direction == Direction::AtLeast { ">=" } else { "<=" };
            failures.push(format!("{} = {value} (required {op} {})", a.metric, a.threshold));
        }
    }
    Ok(failures)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<serde_json::Value> {
    let v = serde_json::to_value(value).map_err(|e| Error::Input(format!("report encoding: {e}")))?;
    let mut text = serde_json::to_string_pretty(&v).expect("JSON values serialize");
    text.push('\n');
    write_text(path, &text)?;
    Ok(v)
}

fn append_log(dir: &Path, line: &str) {
    use std::io::Write as _;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("run.log"))
    {
        let _ = writeln!(f, "{stamp}\t{line}");
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen => "gen",
        Command::Extract => "extract",
        Command::TrainProbe => "train-probe",
        Command::EvalProbe { .. } => "eval-probe",
        Command::Mixture => "mixture",
        Command::TrainFilter => "train-filter",
        Command::EvalFilter => "eval-filter",
        Command::Kib { .. } => "kib",
        Command::Causality => "causality",
        Command::ValidateDump { .. } => "validate-dump",
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let asserts = cli
        .asserts
        .iter()
        .map(|a| parse_assertion(a))
        .collect::<Result<Vec<_>>>()?;
    if let Command::ValidateDump {
        files,
        manifest,
        dumps,
    } = &cli.command
    {
        return match commands::validate_dump(files, manifest.as_deref(), dumps.as_deref())? {
            Outcome::Invalid(n) if n > 0 => Ok(1),
            _ => Ok(0),
        };
    }
    let cfg = resolve_config(cli)?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let echo = cfg.to_json();
    if RunConfig::from_json(&echo)? != cfg {
        return Err(Error::Contract("resolved config does not round-trip".into()));
    }
    write_text(&dir.join("resolved_config.json"), &echo)?;
    let name = command_name(&cli.command);
    append_log(&dir, &format!("{name} started"));
    let outcome = commands::run(&cli.command, &cfg.effective(), &dir);
    let report = match outcome {
        Ok(Outcome::Report(r)) => r,
        Ok(Outcome::Invalid(_)) => unreachable!("only validate-dump reports invalid files"),
        Err(e) => {
            append_log(&dir, &format!("{name} failed: {e}"));
            return Err(e);
        }
    };
    let failures = check_assertions(&report, &asserts)?;
    for f in &failures {
        eprintln!("assertion failed: {f}");
    }
    append_log(
        &dir,
        &format!("{name} finished, {} assertion(s) failed", failures.len()),
    );
    Ok(if failures.is_empty() { 0 } else { 1 })
}

/// Parses arguments and runs one command, returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
