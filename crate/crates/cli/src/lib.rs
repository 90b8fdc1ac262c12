//! The `tracekit` command line. [`run_cli`] parses arguments, runs one
//! subcommand and maps the outcome to an exit code: 0 on success, 1 when
//! the input data is bad, 2 on a usage error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod table;

pub use table::{render_table, TableRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A usage problem found after parsing, such as contradictory flags.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "tracekit",
    version,
    about = "Trace-link recovery, evaluation and review"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a dataset manifest and print per-query counts.
    Ingest(IngestArgs),
    /// Score every candidate pair of a query and write a CSV.
    Score(ScoreArgs),
    /// Split the candidate pairs of a query with a seed.
    Split(SplitArgs),
    /// Evaluate scored candidates on the eval part of a partition.
    Eval(EvalArgs),
    /// Run every scorer over every seed and write results and a table.
    Run(RunArgs),
    /// Report (and optionally prune) artifacts without any true link.
    Orphans(OrphanArgs),
    /// Dataset health, misprediction features and agreement analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Start the review service.
    Serve(ServeArgs),
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [a, b, c] = parts[..] else {
        return Err("expected three comma-separated fractions, e.g. 0.35,0.10,0.55".into());
    };
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err("fractions must lie in [0, 1] and sum to 1".into());
    }
    Ok([a, b, c])
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err("threshold must lie in [0, 1]".into())
    }
}

#[derive(Args, Debug, Clone)]
pub struct DatasetArgs {
    /// Dataset manifest (JSON).
    #[arg(long, value_name = "MANIFEST")]
    pub dataset: PathBuf,
    /// Query to use; may be omitted when the dataset has exactly one.
    #[arg(long)]
    pub query: Option<String>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Also write the summary as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// `vsm` or `external:<command line | http url>`, optionally `NAME=` prefixed.
    #[arg(long, default_value = "vsm")]
    pub scorer: String,
    /// Output CSV (standard output when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Seed of the shuffle; the same seed always gives the same partition.
    #[arg(long)]
    pub seed: u64,
    /// Train, validation and eval fractions.
    #[arg(long, default_value = "0.35,0.10,0.55", value_parser = parse_fractions)]
    pub split: [f64; 3],
    /// Output partition JSON (standard output when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Scored-candidates CSV written by `score`.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Partition JSON written by `split`.
    #[arg(long, value_name = "FILE")]
    pub partition: PathBuf,
    /// Scores at or above this are predicted links.
    #[arg(long, default_value = "0.5", value_parser = parse_threshold)]
    pub threshold: f64,
    /// Output metrics JSON (standard output when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Dataset manifests; repeat for several datasets.
    #[arg(long = "dataset", value_name = "MANIFEST", required = true)]
    pub datasets: Vec<PathBuf>,
    /// Query to run; by default every query of each dataset.
    #[arg(long)]
    pub query: Option<String>,
    /// Scorers; repeat for several.
    #[arg(long = "scorer", default_value = "vsm")]
    pub scorers: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Train, validation and eval fractions.
    #[arg(long, default_value = "0.35,0.10,0.55", value_parser = parse_fractions)]
    pub split: [f64; 3],
    /// Scores at or above this are predicted links.
    #[arg(long, default_value = "0.5", value_parser = parse_threshold)]
    pub threshold: f64,
    /// Worker threads for scoring and (scorer, seed) cells (0 = all cores, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory for results.json, table.md, timing.json, run-manifest.json,
    /// scores/ and partitions/.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SidesArg {
    Both,
    Source,
    Target,
}

#[derive(Args, Debug)]
pub struct OrphanArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Which side of a query counts toward orphans.
    #[arg(long, value_enum, default_value = "both")]
    pub sides: SidesArg,
    /// Write a pruned copy of the dataset to --out.
    #[arg(long)]
    pub prune: bool,
    /// Directory for the pruned manifest (with --prune) or file for the JSON report.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Readability, frequency bands and out-of-vocabulary terms per layer.
    Health(HealthArgs),
    /// False positives and negatives of a run, optionally with link features.
    Mispredictions(MispredictionArgs),
    /// Overlap of two pair sets (misprediction JSON or answer CSV).
    Agreement(AgreementArgs),
}

#[derive(Args, Debug)]
pub struct HealthArgs {
    /// Dataset manifest (JSON).
    #[arg(long, value_name = "MANIFEST")]
    pub dataset: PathBuf,
    /// Low-frequency band: share of token mass below this.
    #[arg(long, default_value_t = tracekit::quality::DEFAULT_LOW_THRESHOLD)]
    pub low: f64,
    /// High-frequency band: share of token mass above this.
    #[arg(long, default_value_t = tracekit::quality::DEFAULT_HIGH_THRESHOLD)]
    pub high: f64,
    /// Model vocabulary, one word per line, for out-of-vocabulary terms.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MispredictionArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Scored-candidates CSV written by `score`.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Partition JSON written by `split`.
    #[arg(long, value_name = "FILE")]
    pub partition: PathBuf,
    /// Scores at or above this are predicted links.
    #[arg(long, default_value = "0.5", value_parser = parse_threshold)]
    pub threshold: f64,
    /// Synonym/antonym lexicon (defaults to the bundled one) for link features.
    #[arg(long, value_name = "FILE")]
    pub lexicon: Option<PathBuf>,
    /// English dictionary, one word per line; enables link features.
    #[arg(long, value_name = "FILE")]
    pub dictionary: Option<PathBuf>,
    /// Model vocabulary, one word per line; required with --dictionary.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Worker threads for link features (0 = all cores, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Output JSON (standard output when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AgreementArgs {
    /// First pair set.
    #[arg(value_name = "SET_A")]
    pub a: PathBuf,
    /// Second pair set.
    #[arg(value_name = "SET_B")]
    pub b: PathBuf,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Project-store root.
    #[arg(long, env = "TRACEKIT_HOME", default_value = "tracekit-home")]
    pub home: PathBuf,
    /// Worker threads for scoring (0 = all cores, 1 = sequential).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to standard error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DOMAIN
            }
        }
    }
}
