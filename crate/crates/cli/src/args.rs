use std::net::IpAddr;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use racx::explain::{Method, DEFAULT_TOP_N, DEFAULT_WINDOW};
use racx::harness::Group;

#[derive(Debug, Parser)]
#[command(name = "racx", version, about = "Medical code prediction with attention and distillation explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted trigger phrases.
    GenCorpus(GenCorpusArgs),
    /// Train a model and write its directory.
    Train(TrainArgs),
    /// Evaluate a model on a dataset and print the metrics report.
    Eval(EvalArgs),
    /// Predict codes for a text or for every note of a dataset.
    Predict(PredictArgs),
    /// Extract evidence snippets for predicted codes.
    Explain(ExplainArgs),
    /// Fit linear students to a model's logits.
    Distill(DistillArgs),
    /// Compare students with their teacher.
    Fidelity(FidelityArgs),
    /// Build question sheets, ingest ratings, compute consistency.
    #[command(subcommand)]
    Sheet(SheetCommand),
    /// Compare coder and system agreement with the reference codes.
    Baseline(BaselineArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

/// Half-open note index range `START:END`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoteRange {
    pub start: usize,
    pub end: usize,
}

impl FromStr for NoteRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or_else(|| format!("expected START:END, got {s:?}"))?;
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
        let (start, end) = (parse(a)?, parse(b)?);
        if start >= end {
            return Err(format!("empty range {start}:{end}"));
        }
        Ok(Self { start, end })
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Corpus directory (notes.jsonl and codes.jsonl) or a notes JSONL file.
    #[arg(long)]
    pub data: PathBuf,
    /// Code vocabulary JSONL; defaults to codes.jsonl next to the notes.
    #[arg(long)]
    pub codes: Option<PathBuf>,
    /// Use only notes START..END (zero-based, end exclusive).
    #[arg(long, value_name = "START:END")]
    pub range: Option<NoteRange>,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Number of codes.
    #[arg(long)]
    pub codes: Option<usize>,
    /// Number of notes.
    #[arg(long)]
    pub notes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON generator settings; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON file `{"model": {...}, "train": {...}, "min_freq": n}`; every
    /// field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Decision threshold for validation metrics.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-code counts as CSV.
    #[arg(long)]
    pub per_code_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Text of a single note.
    #[arg(long, conflicts_with_all = ["data", "input"])]
    pub text: Option<String>,
    /// Predict every note of this corpus directory or notes file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Read `{"text": ...}` or `{"note_id": ..., "text": ...}` lines from
    /// this file, `-` for stdin.
    #[arg(long, conflicts_with = "data")]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Students directory written by `distill`; needed for `--method kd`.
    #[arg(long)]
    pub students: Option<PathBuf>,
    /// attn or kd.
    #[arg(long)]
    pub method: Method,
    /// Text to explain, with `--code`.
    #[arg(long, requires = "code", conflicts_with = "input")]
    pub text: Option<String>,
    #[arg(long)]
    pub code: Option<String>,
    /// `predict` output lines; every predicted code is explained. `-` reads
    /// stdin.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    pub top_n: usize,
    /// Tokens kept either side of an attention peak.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON distillation settings; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weights kept per student; 0 keeps all.
    #[arg(long)]
    pub max_nonzero: Option<usize>,
    /// Feature vocabulary size.
    #[arg(long, default_value_t = 20_000)]
    pub max_features: usize,
    /// Worker threads; codes are fit in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output students directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FidelityArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub students: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Write teacher and student logits as JSON here.
    #[arg(long)]
    pub dump_logits: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SheetCommand {
    /// Sample confident predictions and attach each method's top snippet.
    Build(SheetBuildArgs),
    /// Append ratings from a JSONL file to the rating store.
    Ingest(SheetIngestArgs),
    /// Inter-group consistency of the current ratings for a sheet.
    Consistency(SheetConsistencyArgs),
}

#[derive(Debug, Args)]
pub struct SheetBuildArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub students: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub sheet_id: String,
    #[arg(long)]
    pub n_items: usize,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_values_t = [Method::Attn, Method::Kd])]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Output sheet JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SheetIngestArgs {
    #[arg(long)]
    pub sheet: PathBuf,
    /// Rating store; created when missing.
    #[arg(long)]
    pub ratings: PathBuf,
    /// Lines `{"annotator_id", "group", "item_id", "rating"}`, optionally
    /// with `timestamp` (ms) and `overwrite`.
    #[arg(long)]
    pub input: PathBuf,
    /// Let every line replace an earlier rating of the same item.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct SheetConsistencyArgs {
    #[arg(long)]
    pub sheet: PathBuf,
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, default_value = "A")]
    pub group_a: Group,
    #[arg(long, default_value = "B")]
    pub group_b: Group,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Coder annotations JSONL.
    #[arg(long)]
    pub coders: PathBuf,
    /// Reference notes with gold codes.
    #[command(flatten)]
    pub reference: DataArgs,
    /// System predictions come from this model...
    #[arg(long, conflicts_with = "system", required_unless_present = "system")]
    pub model: Option<PathBuf>,
    /// ...or from lines `{"note_id": ..., "codes": [...]}`.
    #[arg(long)]
    pub system: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// JSON service configuration; defaults to $RACX_CONFIG.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<IpAddr>,
    /// Overrides $RACX_PORT and the config file.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub students: Option<PathBuf>,
    #[arg(long)]
    pub sheets_dir: Option<PathBuf>,
    #[arg(long)]
    pub ratings: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}
