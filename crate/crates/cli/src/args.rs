//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use drivectx::dataset::ShotUnit;
use drivectx::evaluation::Averaging;
use drivectx::protocol::QueryMode;

#[derive(Debug, Parser)]
#[command(name = "contextd", version, about = "Driving-context recognition over vision-language backends")]
pub struct Cli {
    /// Configuration file (TOML); CONTEXTD_* variables override its keys
    #[arg(long, global = true, env = "CONTEXTD_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Log filter for the structured stderr log, e.g. `info` or `drivectx=debug`
    #[arg(long, global = true, env = "CONTEXTD_LOG", value_name = "FILTER", default_value = "warn")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label images by agreement between backends
    Annotate(AnnotateArgs),
    /// Sample machine labels and verify them by hand
    Review(ReviewArgs),
    /// Read a dataset from VQA-style question and annotation files
    Import(ImportArgs),
    /// Write a dataset as VQA-style question and annotation files
    Export(ExportArgs),
    /// Per-kind and per-source counts of a dataset
    Stats(StatsArgs),
    /// Image-level train/test split
    Split(SplitArgs),
    /// Nested k-shot subsets of a training set
    Shots(ShotsArgs),
    /// Score a backend against a labeled dataset
    Evaluate(EvaluateArgs),
    /// Time individual or joint queries against a backend
    Bench(BenchArgs),
    /// Keep the live context state of a frame stream up to date
    Run(RunArgs),
    /// Ask one free-form question about one image
    Ask(AskArgs),
    /// Generate synthetic datasets and drive traces
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Serve a backend endpoint over the wire protocol
    Serve(ServeArgs),
    /// Check a remote backend against the wire protocol
    Conformance(ConformanceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Individual,
    Joint,
}

impl From<ModeArg> for QueryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Individual => QueryMode::Individual,
            ModeArg::Joint => QueryMode::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AveragingArg {
    Micro,
    Macro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Micro => Averaging::Micro,
            AveragingArg::Macro => Averaging::Macro,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UnitArg {
    Pair,
    Image,
}

impl From<UnitArg> for ShotUnit {
    fn from(u: UnitArg) -> Self {
        match u {
            UnitArg::Pair => ShotUnit::Pair,
            UnitArg::Image => ShotUnit::Image,
        }
    }
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Individual questions or one joint prompt per image
    #[arg(long, value_enum, default_value = "individual")]
    pub mode: ModeArg,
    /// In joint mode, do not retry unparseable kinds individually
    #[arg(long)]
    pub no_fallback: bool,
    /// Per-call timeout in milliseconds
    #[arg(long, value_name = "MS", default_value_t = 5000)]
    pub timeout_ms: u64,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    /// Images to label: a manifest, an image catalog or a JSON list of images
    #[arg(long, value_name = "PATH")]
    pub images: PathBuf,
    /// Backend name from the config or an endpoint; repeat for each voter (default: every configured backend)
    #[arg(long = "backend", value_name = "BACKEND")]
    pub backends: Vec<String>,
    /// Output manifest
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Pairs left without a label, as JSON lines
    #[arg(long, value_name = "PATH")]
    pub uncertain: Option<PathBuf>,
    /// Dataset name (default: output file stem)
    #[arg(long)]
    pub name: Option<String>,
    /// Every vote must exceed this confidence (default: from config, 0.9)
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Comma-separated kinds (default: all)
    #[arg(long)]
    pub kinds: Option<String>,
    /// Drop agreed "no" answers instead of recording them as negatives
    #[arg(long)]
    pub no_negatives: bool,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    /// Dataset manifest (path or configured name)
    #[arg(long)]
    pub dataset: String,
    /// Fraction of machine labels to review, in (0, 1]
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub seed: u64,
    /// Append-only audit log (JSON lines)
    #[arg(long, value_name = "PATH")]
    pub audit: PathBuf,
    /// Reviewed manifest
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Decisions file, one `id,accept|reject|skip` or JSON object per line (default: prompt on stdin)
    #[arg(long, value_name = "PATH")]
    pub decisions: Option<PathBuf>,
    /// Print the sample as JSON lines and exit without reviewing
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// Directory holding `<name>_questions.json` and friends
    #[arg(long, value_name = "DIR", requires = "name")]
    pub dir: Option<PathBuf>,
    /// Dataset name used to find files in --dir
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_name = "PATH", conflicts_with = "dir", requires_all = ["annotations", "images"])]
    pub questions: Option<PathBuf>,
    #[arg(long, value_name = "PATH", conflicts_with = "dir")]
    pub annotations: Option<PathBuf>,
    /// Image catalog
    #[arg(long, value_name = "PATH", conflicts_with = "dir")]
    pub images: Option<PathBuf>,
    /// Provenance side file (JSON lines)
    #[arg(long, value_name = "PATH", conflicts_with = "dir")]
    pub extensions: Option<PathBuf>,
    /// Output manifest
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Dataset manifest (path or configured name)
    #[arg(long)]
    pub dataset: String,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Dataset manifest (path or configured name)
    #[arg(long)]
    pub dataset: String,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset manifest (path or configured name)
    #[arg(long)]
    pub dataset: String,
    /// Fraction of images in the training split
    #[arg(long, default_value_t = 0.7)]
    pub ratio: f64,
    #[arg(long)]
    pub seed: u64,
    /// Receives `<name>_train.json` and `<name>_test.json`
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ShotsArgs {
    /// Training manifest (path or configured name)
    #[arg(long)]
    pub dataset: String,
    /// Comma-separated shot counts
    #[arg(long, value_delimiter = ',', default_value = "4,16,64,256")]
    pub k: Vec<usize>,
    #[arg(long)]
    pub seed: u64,
    /// What one shot is
    #[arg(long, value_enum, default_value = "pair")]
    pub unit: UnitArg,
    /// Receives `<name>_<k>shot.json` per k
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset manifest (path or configured name)
    #[arg(long)]
    pub dataset: String,
    /// Backend name from the config or an endpoint
    #[arg(long)]
    pub backend: String,
    #[command(flatten)]
    pub query: QueryArgs,
    /// Headline averaging
    #[arg(long, value_enum, default_value = "micro")]
    pub averaging: AveragingArg,
    /// Full report as JSON
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Flat kind x source table as CSV
    #[arg(long, value_name = "PATH")]
    pub table: Option<PathBuf>,
    /// Images evaluated concurrently
    #[arg(long, default_value_t = 4)]
    pub in_flight: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Backend name from the config or an endpoint
    #[arg(long)]
    pub backend: String,
    /// Images to query: a manifest, an image catalog or a JSON list of images
    #[arg(long, value_name = "PATH")]
    pub images: PathBuf,
    /// Use only the first N images
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    #[arg(long, value_enum, default_value = "individual")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    /// Comma-separated kinds (default: all)
    #[arg(long)]
    pub kinds: Option<String>,
    /// Per-call timeout in milliseconds
    #[arg(long, value_name = "MS", default_value_t = 120_000)]
    pub timeout_ms: u64,
    /// Run mock backends on simulated time (their modeled cost, no waiting)
    #[arg(long)]
    pub sim_clock: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Backend name from the config or an endpoint
    #[arg(long)]
    pub backend: String,
    /// Frame source: a trace file (`trace:PATH` or `*.jsonl`), `dir:PATH` or `tcp:HOST:PORT` to listen on
    #[arg(long, value_name = "SOURCE")]
    pub frames: String,
    /// Where snapshots go: `-` for stdout, `tcp://HOST:PORT` or a file path
    #[arg(long, value_name = "TARGET", default_value = "-")]
    pub sink: String,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Time allowed for one query
    #[arg(long, value_name = "MS")]
    pub budget_ms: Option<f64>,
    /// Scheduler cycle period
    #[arg(long, value_name = "MS")]
    pub cycle_ms: Option<f64>,
    /// Comma-separated kinds to keep fresh (default: all)
    #[arg(long)]
    pub kinds: Option<String>,
    /// Refresh interval of fast-changing kinds
    #[arg(long, value_name = "MS")]
    pub refresh_fast: Option<f64>,
    /// Refresh interval of slow-changing kinds
    #[arg(long, value_name = "MS")]
    pub refresh_slow: Option<f64>,
    /// Scheduled queries per cycle in individual mode
    #[arg(long, value_name = "N")]
    pub max_per_cycle: Option<usize>,
    /// Stop after this many cycles
    #[arg(long, value_name = "N")]
    pub max_cycles: Option<u64>,
    /// Run on simulated time; only meaningful with trace sources and mock backends
    #[arg(long)]
    pub sim_clock: bool,
    /// Directory sources: send file bytes instead of paths
    #[arg(long)]
    pub inline: bool,
    /// Directory sources: stop once no new file appears for this long
    #[arg(long, value_name = "MS")]
    pub idle_timeout_ms: Option<u64>,
    /// Answer ad-hoc questions (one per line) on this address
    #[arg(long, value_name = "HOST:PORT")]
    pub adhoc: Option<String>,
    /// Write the run summary as JSON to this file
    #[arg(long, value_name = "PATH")]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    /// Backend name from the config or an endpoint
    #[arg(long)]
    pub backend: String,
    /// Image locator handed to the backend
    #[arg(long, value_name = "LOCATOR", required_unless_present = "image_file")]
    pub image: Option<String>,
    /// Send this file's bytes inline instead of a locator
    #[arg(long, value_name = "PATH", conflicts_with = "image")]
    pub image_file: Option<PathBuf>,
    /// The question, e.g. "Are there tall buildings around?"
    #[arg(long)]
    pub question: String,
    /// Timeout in milliseconds
    #[arg(long, value_name = "MS", default_value_t = 5000)]
    pub timeout_ms: u64,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// A labeled dataset with the hand- or machine-annotated layout
    Dataset(SynthDatasetArgs),
    /// A drive trace whose ground truth changes once
    Trace(SynthTraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    /// 1467 hand-labeled images over four sources
    Ha,
    /// The machine-labeled corpus, scaled down by --divisor
    Ma,
}

#[derive(Debug, Args)]
pub struct SynthDatasetArgs {
    #[arg(long, value_enum)]
    pub preset: PresetArg,
    #[arg(long)]
    pub seed: u64,
    /// Scale-down factor for the machine-labeled preset
    #[arg(long, default_value_t = 100)]
    pub divisor: usize,
    /// Output manifest
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Also write the ground-truth file mock backends answer from
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthTraceArgs {
    #[arg(long)]
    pub seed: u64,
    /// Trace length
    #[arg(long, value_name = "S", default_value_t = 60)]
    pub seconds: u64,
    /// Time between frames
    #[arg(long, value_name = "MS", default_value_t = 50)]
    pub frame_ms: u64,
    /// Kind whose ground truth flips
    #[arg(long, default_value = "urban_canyon")]
    pub kind: String,
    /// When the flip happens
    #[arg(long, value_name = "MS", default_value_t = 30_000)]
    pub flip_at_ms: u64,
    /// Frame trace (JSON lines)
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Ground-truth file for mock backends
    #[arg(long, value_name = "PATH")]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Backend name from the config or an endpoint to expose
    #[arg(long)]
    pub backend: String,
    /// Address to listen on
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:7070")]
    pub listen: String,
}

#[derive(Debug, Args)]
pub struct ConformanceArgs {
    /// Address of the backend under test
    #[arg(long, value_name = "HOST:PORT")]
    pub endpoint: String,
    /// Image locator the backend knows
    #[arg(long, value_name = "LOCATOR")]
    pub probe_image: String,
    /// Ground-truth file holding the probe image's expected answers
    #[arg(long, value_name = "PATH")]
    pub truth: Option<PathBuf>,
    /// Expected per-query service time
    #[arg(long, value_name = "MS")]
    pub expected_delay_ms: Option<f64>,
    /// Allowed deviation from the expected service time
    #[arg(long, value_name = "MS", default_value_t = 5.0)]
    pub tolerance_ms: f64,
}
