//! The `anssel` command line.
//!
//! Every setting can come from a flag, from the JSON object in `--config`
//! (keys are flag names with `_` or `-`), or from the built-in default, in
//! that order of precedence. Logs go to standard error; reports go to a
//! file or standard output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::data::{
    build_bibleqa, convert_span_dataset, parse_bible, parse_trivia, read_groups, split_dataset,
    tokenize, write_groups, ContextMode, DataError, DatasetSpec, QuestionGroup, SpanRecord, Translation,
};
use crate::embeddings::{
    concat_embeddings, load_pretrained, nearest_neighbors, train_cbow, CbowConfig,
    CbowObjective, EmbeddingError, EmbeddingMatrix,
};
use crate::evaluation::{self, random_baseline, EvalError, EvalReport, PredictionSet, BASELINE_RNG};
use crate::models::{Model, ModelConfig, ModelError, ModelKind, Readout};
use crate::training::{
    self, load_checkpoint, save_checkpoint, transfer_weights, Checkpoint, CheckpointError, EpochRecord,
    Featurizer, Precision, TrainConfig, TrainError, TransferError, TransferReport,
};

/// Exit status and message of a failed command.
#[derive(Debug, PartialEq)]
pub enum CliError {
    /// Bad command line: exit 2.
    Usage(String),
    /// Inputs that exist but are unacceptable: exit 3.
    Validation(String),
    /// Anything else: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => e.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Io(e) => e.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(e) => CliError::Runtime(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::Eval(e) => e.into(),
            e @ (TrainError::Config(_) | TrainError::EmptyTrainingSet) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "anssel", version, about = "Answer sentence selection experiments")]
pub struct Cli {
    /// JSON object of default flag values for the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build question groups from a Bible corpus and trivia questions.
    BuildDataset(BuildDatasetArgs),
    /// Turn span-annotated reading-comprehension records into question groups.
    ConvertSpan(ConvertSpanArgs),
    /// Train CBOW word vectors.
    TrainEmbeddings(TrainEmbeddingsArgs),
    /// Train a model on a dataset split and report test metrics.
    Train(TrainArgs),
    /// Initialise from a checkpoint, then train on target data.
    TransferTrain(TransferTrainArgs),
    /// Report F1 and MRR for a model or the random baseline.
    Evaluate(EvaluateArgs),
    /// Rank the verses of one chapter against a question.
    Predict(PredictArgs),
    /// List the nearest neighbours of a word.
    Nearest(NearestArgs),
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Bible corpus TSV: translation, book, chapter, verse, text.
    #[arg(long)]
    pub bible: Option<PathBuf>,
    /// Trivia questions as TSV or JSON lines.
    #[arg(long)]
    pub trivia: Option<PathBuf>,
    /// `window-N` or `chapter` [default: window-3].
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated translation codes [default: KJV,ASV,YLT,WEB].
    #[arg(long)]
    pub translations: Option<String>,
    /// Output JSON-lines dataset.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertSpanArgs {
    /// JSON lines of {context, question, answer_text, answer_start}.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainEmbeddingsArgs {
    /// Bible corpus TSV; every verse is one sentence.
    #[arg(long, conflicts_with = "text")]
    pub bible: Option<PathBuf>,
    /// Plain text, one sentence per line.
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Output vectors, one `token v1 .. vN` line per word.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 200]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Context words on each side [default: 5].
    #[arg(long)]
    pub window: Option<usize>,
    /// Noise words per example [default: 5].
    #[arg(long)]
    pub negative: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.05]
    #[arg(long)]
    pub lr: Option<f64>,
    /// `negative-sampling` or `full-softmax` [default: negative-sampling].
    #[arg(long)]
    pub objective: Option<String>,
    /// [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Settings shared by `train` and `transfer-train`.
#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset in JSON lines.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Word vector files; several are concatenated in order.
    #[arg(long, num_args = 1..)]
    pub embeddings: Option<Vec<PathBuf>>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report file [default: standard output].
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Only use groups of this translation.
    #[arg(long)]
    pub translation: Option<String>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// `f32` or `f64` [default: f32].
    #[arg(long)]
    pub precision: Option<String>,
    /// [default: 30]
    #[arg(long)]
    pub max_question_len: Option<usize>,
    /// [default: 60]
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    /// Seed for every random choice in the run [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `rnn`, `cnn` or `bidaf`.
    #[arg(long)]
    pub model: Option<String>,
    #[command(flatten)]
    pub fit: FitArgs,
    /// [default: 100]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub filters: Option<usize>,
    /// Convolution width [default: 3].
    #[arg(long)]
    pub window: Option<usize>,
    /// [default: 0.5]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// `final-state` or `max-pool` [default: final-state].
    #[arg(long)]
    pub readout: Option<String>,
}

#[derive(Debug, Args)]
pub struct TransferTrainArgs {
    /// Source checkpoint.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// `baseline`, `rnn`, `cnn` or `bidaf`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Required unless the model is `baseline`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub embeddings: Option<Vec<PathBuf>>,
    /// `all` or `test`; `test` repeats the split `train` makes with the same seed [default: all].
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub translation: Option<String>,
    /// [default: 30]
    #[arg(long)]
    pub max_question_len: Option<usize>,
    /// [default: 60]
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    /// Report file [default: standard output].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub embeddings: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub bible: Option<PathBuf>,
    /// [default: KJV]
    #[arg(long)]
    pub translation: Option<String>,
    #[arg(long)]
    pub book: Option<String>,
    #[arg(long)]
    pub chapter: Option<u32>,
    /// `N` or `A-B` [default: the whole chapter].
    #[arg(long)]
    pub verses: Option<String>,
    #[arg(long)]
    pub question: Option<String>,
    /// [default: 30]
    #[arg(long)]
    pub max_question_len: Option<usize>,
    /// [default: 60]
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    /// Output JSON lines [default: standard output].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NearestArgs {
    #[arg(long, num_args = 1..)]
    pub embeddings: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub word: Option<String>,
    /// [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
}

/// Flag values loaded from `--config`.
#[derive(Debug, Default)]
struct FileConfig {
    values: Map<String, Value>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = read_input(path)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::Validation(format!(
                "{}: expected a JSON object",
                path.display()
            )));
        };
        let values = map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect();
        Ok(FileConfig { values })
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| CliError::Validation(format!("config key {key}: {e}"))),
        }
    }

    /// Flag, then config file, then `default`.
    fn or<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    fn required<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.opt(flag, key)?.ok_or_else(|| {
            CliError::Usage(format!("missing required flag --{}", key.replace('_', "-")))
        })
    }
}

/// Parse `args` (program name first), run the command, and return the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .try_init();
    log::set_max_level(level);

    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{}", e.message());
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::BuildDataset(a) => build_dataset(a, &file),
        Command::ConvertSpan(a) => convert_span(a, &file),
        Command::TrainEmbeddings(a) => train_embeddings(a, &file),
        Command::Train(a) => train(a, &file),
        Command::TransferTrain(a) => transfer_train(a, &file),
        Command::Evaluate(a) => evaluate(a, &file),
        Command::Predict(a) => predict(a, &file),
        Command::Nearest(a) => nearest(a, &file),
    }
}

fn echo<T: Serialize>(command: &str, settings: &T) {
    log::info!(
        "{command} config: {}",
        serde_json::to_string(settings).expect("settings serialize")
    );
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("input file {} does not exist", path.display())))
    }
}

fn read_input(path: &Path) -> Result<String> {
    require_file(path)?;
    std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn open_input(path: &Path) -> Result<BufReader<File>> {
    require_file(path)?;
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Refuse to overwrite any input.
fn check_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let resolved = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let target = resolved(out);
    if inputs.iter().any(|i| resolved(i) == target) {
        return Err(CliError::Validation(format!(
            "output {} would overwrite an input",
            out.display()
        )));
    }
    Ok(())
}

/// Write through a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: io::Error| CliError::Runtime(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, bytes),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn parse_value<T: std::str::FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| CliError::Validation(format!("invalid {what} {s:?}: {e}")))
}

fn parse_translations(s: &str) -> Result<Vec<Translation>> {
    let list = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| parse_value::<Translation>(t, "translation"))
        .collect::<Result<Vec<_>>>()?;
    if list.is_empty() {
        return Err(CliError::Validation("no translations given".into()));
    }
    Ok(list)
}

fn build_dataset(a: &BuildDatasetArgs, file: &FileConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Settings {
        bible: PathBuf,
        trivia: PathBuf,
        mode: String,
        translations: String,
        out: PathBuf,
    }
    let s = Settings {
        bible: file.required(a.bible.clone(), "bible")?,
        trivia: file.required(a.trivia.clone(), "trivia")?,
        mode: file.or(a.mode.clone(), "mode", "window-3".into())?,
        translations: file.or(a.translations.clone(), "translations", "KJV,ASV,YLT,WEB".into())?,
        out: file.required(a.out.clone(), "out")?,
    };
    echo("build-dataset", &s);
    let spec = DatasetSpec {
        mode: parse_value::<ContextMode>(&s.mode, "mode")?,
        translations: parse_translations(&s.translations)?,
    };
    check_output(&s.out, &[&s.bible, &s.trivia])?;
    let corpus = parse_bible(open_input(&s.bible)?)?;
    let questions = parse_trivia(open_input(&s.trivia)?, Some(&corpus))?;
    let groups = build_bibleqa(&corpus, &questions, &spec)?;
    let mut buf = Vec::new();
    write_groups(&mut buf, &groups)?;
    write_atomic(&s.out, &buf)?;
    log::info!(
        "wrote {} groups from {} questions to {}",
        groups.len(),
        questions.len(),
        s.out.display()
    );
    Ok(())
}

fn convert_span(a: &ConvertSpanArgs, file: &FileConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Settings {
        input: PathBuf,
        out: PathBuf,
    }
    let s = Settings {
        input: file.required(a.input.clone(), "input")?,
        out: file.required(a.out.clone(), "out")?,
    };
    echo("convert-span", &s);
    check_output(&s.out, &[&s.input])?;
    let mut records = Vec::new();
    for (i, line) in open_input(&s.input)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SpanRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Validation(format!("{} line {}: {e}", s.input.display(), i + 1)))?;
        records.push(record);
    }
    let conversion = convert_span_dataset(&records);
    for e in &conversion.rejected {
        log::warn!("skipped {e}");
    }
    let mut buf = Vec::new();
    write_groups(&mut buf, &conversion.groups)?;
    write_atomic(&s.out, &buf)?;
    log::info!(
        "wrote {} groups; {} answers crossed sentence boundaries, {} records rejected",
        conversion.groups.len(),
        conversion.dropped,
        conversion.rejected.len()
    );
    Ok(())
}

fn train_embeddings(a: &TrainEmbeddingsArgs, file: &FileConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Settings {
        bible: Option<PathBuf>,
        text: Option<PathBuf>,
        out: PathBuf,
        cbow: CbowConfig,
    }
    let defaults = CbowConfig::default();
    let objective: String = file.or(a.objective.clone(), "objective", "negative-sampling".into())?;
    let objective = match objective.as_str() {
        "negative-sampling" => CbowObjective::NegativeSampling,
        "full-softmax" => CbowObjective::FullSoftmax,
        other => return Err(CliError::Validation(format!("unknown objective {other:?}"))),
    };
    let s = Settings {
        bible: file.opt(a.bible.clone(), "bible")?,
        text: file.opt(a.text.clone(), "text")?,
        out: file.required(a.out.clone(), "out")?,
        cbow: CbowConfig {
            window: file.or(a.window, "window", defaults.window)?,
            dim: file.or(a.dim, "dim", defaults.dim)?,
            negative: file.or(a.negative, "negative", defaults.negative)?,
            epochs: file.or(a.epochs, "epochs", defaults.epochs)?,
            learning_rate: file.or(a.lr, "lr", defaults.learning_rate)?,
            seed: file.or(a.seed, "seed", defaults.seed)?,
            objective,
        },
    };
    echo("train-embeddings", &s);
    let (corpus, input) = match (&s.bible, &s.text) {
        (Some(bible), None) => (parse_bible(open_input(bible)?)?.token_sequences(), bible),
        (None, Some(text)) => {
            let sentences = read_input(text)?
                .lines()
                .map(tokenize)
                .filter(|t| !t.is_empty())
                .collect();
            (sentences, text)
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("give only one of --bible and --text".into()));
        }
        (None, None) => return Err(CliError::Usage("missing required flag --bible or --text".into())),
    };
    check_output(&s.out, &[input])?;
    let outcome = train_cbow(&corpus, &s.cbow)?;
    log::info!(
        "loss {:.6} -> {:.6} over {} epochs",
        outcome.initial_loss,
        outcome.final_loss,
        s.cbow.epochs
    );
    let mut buf = Vec::new();
    outcome.matrix.write_text(&mut buf)?;
    write_atomic(&s.out, &buf)?;
    log::info!("wrote {} vectors to {}", outcome.matrix.vocab.len() - 2, s.out.display());
    Ok(())
}

/// Dimension of a vector file, taken from its first non-empty line.
fn vector_dim(path: &Path, text: &str) -> Result<usize> {
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| CliError::Validation(format!("{}: no vectors", path.display())))?;
    match line.split(' ').filter(|f| !f.is_empty()).count() {
        0 | 1 => Err(CliError::Validation(format!("{}: no vector components", path.display()))),
        n => Ok(n - 1),
    }
}

/// Load each file and concatenate them column-wise in order.
fn load_embeddings(paths: &[PathBuf]) -> Result<EmbeddingMatrix> {
    let mut combined: Option<EmbeddingMatrix> = None;
    for path in paths {
        let text = read_input(path)?;
        let dim = vector_dim(path, &text)?;
        let m = load_pretrained(text.as_bytes(), dim)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        log::info!("{}: {} vectors of dimension {dim}", path.display(), m.vocab.len() - 2);
        combined = Some(match combined {
            None => m,
            Some(prev) => concat_embeddings(&prev, &m),
        });
    }
    combined.ok_or_else(|| CliError::Usage("missing required flag --embeddings".into()))
}

fn load_groups(path: &Path, translation: Option<&str>) -> Result<Vec<QuestionGroup>> {
    let groups = read_groups(open_input(path)?)?;
    let groups: Vec<QuestionGroup> = match translation {
        None => groups,
        Some(t) => {
            let code = parse_value::<Translation>(t, "translation")?.code();
            groups.into_iter().filter(|g| g.translation == code).collect()
        }
    };
    if groups.is_empty() {
        return Err(CliError::Validation(format!("{}: no question groups", path.display())));
    }
    Ok(groups)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// The JSON report written by `train`, `transfer-train` and `evaluate`.
#[derive(Debug, Serialize)]
pub struct Report {
    pub model: String,
    pub dataset: String,
    pub translation: String,
    pub n: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub mrr: f64,
    pub threshold_f1: f64,
    pub seed: u64,
    pub rng: String,
    /// Questions per gold rank.
    pub ranks: BTreeMap<usize, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<EpochRecord>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferReport>,
}

impl Report {
    fn new(model: String, dataset: &Path, translation: Option<&str>, seed: u64, r: &EvalReport) -> Report {
        Report {
            model,
            dataset: dataset_name(dataset),
            translation: translation.map_or("all".into(), |t| t.to_uppercase()),
            n: r.n,
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            mrr: r.mrr,
            threshold_f1: r.threshold_f1,
            seed,
            rng: BASELINE_RNG.into(),
            ranks: r.rank_histogram(),
            best_epoch: None,
            history: None,
            transfer: None,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }
}

#[derive(Debug, Serialize)]
struct FitSettings {
    data: PathBuf,
    embeddings: Vec<PathBuf>,
    out: PathBuf,
    report: Option<PathBuf>,
    translation: Option<String>,
    train: TrainConfig,
    max_question_len: usize,
    max_answer_len: usize,
}

fn fit_settings(a: &FitArgs, file: &FileConfig) -> Result<FitSettings> {
    let defaults = TrainConfig::default();
    let precision: String = file.or(a.precision.clone(), "precision", "f32".into())?;
    let precision = match precision.as_str() {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => return Err(CliError::Validation(format!("unknown precision {other:?}"))),
    };
    // A missing dataset is reported before any other missing flag.
    let data: PathBuf = file.required(a.data.clone(), "data")?;
    require_file(&data)?;
    let s = FitSettings {
        data,
        embeddings: file.required(a.embeddings.clone(), "embeddings")?,
        out: file.required(a.out.clone(), "out")?,
        report: file.opt(a.report.clone(), "report")?,
        translation: file.opt(a.translation.clone(), "translation")?,
        train: TrainConfig {
            learning_rate: file.or(a.lr, "lr", defaults.learning_rate)?,
            batch_size: file.or(a.batch_size, "batch_size", defaults.batch_size)?,
            max_epochs: file.or(a.max_epochs, "max_epochs", defaults.max_epochs)?,
            patience: file.or(a.patience, "patience", defaults.patience)?,
            seed: file.or(a.seed, "seed", defaults.seed)?,
            precision,
        },
        max_question_len: file.or(a.max_question_len, "max_question_len", Featurizer::DEFAULT_QUESTION_LEN)?,
        max_answer_len: file.or(a.max_answer_len, "max_answer_len", Featurizer::DEFAULT_ANSWER_LEN)?,
    };
    s.train.validate()?;
    let mut inputs: Vec<&Path> = vec![&s.data];
    inputs.extend(s.embeddings.iter().map(PathBuf::as_path));
    check_output(&s.out, &inputs)?;
    if let Some(report) = &s.report {
        check_output(report, &inputs)?;
        if *report == s.out {
            return Err(CliError::Validation("report and checkpoint paths must differ".into()));
        }
    }
    Ok(s)
}

/// Train on the split, then write the checkpoint and the test-part report.
fn fit(s: &FitSettings, model: Model, transfer: Option<TransferReport>) -> Result<()> {
    let groups = load_groups(&s.data, s.translation.as_deref())?;
    let embeddings = load_embeddings(&s.embeddings)?;
    if embeddings.dim != model.config().embedding_dim {
        return Err(ModelError::EmbeddingDim {
            expected: model.config().embedding_dim,
            got: embeddings.dim,
        }
        .into());
    }
    let split = split_dataset(&groups, s.train.seed)?;
    log::info!(
        "split: {} train, {} validation, {} test groups",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let featurizer = Featurizer {
        embeddings: &embeddings,
        max_question_len: s.max_question_len,
        max_answer_len: s.max_answer_len,
    };
    let kind = model.kind();
    let outcome = training::train(
        model,
        &featurizer.prepare_all(&split.train),
        &featurizer.prepare_all(&split.val),
        &s.train,
    )?;
    log::info!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    let test = featurizer.prepare_all(&split.test);
    let eval = evaluation::evaluate(&training::predictions(&outcome.model, &test)?)?;
    log::info!("test f1 {:.4}, mrr {:.4}", eval.f1, eval.mrr);

    let mut report = Report::new(kind.to_string(), &s.data, s.translation.as_deref(), s.train.seed, &eval);
    report.best_epoch = Some(outcome.best_epoch);
    report.history = Some(outcome.history);
    report.transfer = transfer;
    write_atomic(&s.out, &save_checkpoint(&outcome.model))?;
    emit(s.report.as_deref(), &report.to_bytes())
}

fn train(a: &TrainArgs, file: &FileConfig) -> Result<()> {
    let kind_name: String = file.required(a.model.clone(), "model")?;
    let kind = parse_value::<ModelKind>(&kind_name, "model")?;
    let s = fit_settings(&a.fit, file)?;
    let defaults = ModelConfig::default();
    let readout: String = file.or(a.readout.clone(), "readout", "final-state".into())?;
    let readout = match readout.as_str() {
        "final-state" => Readout::FinalState,
        "max-pool" => Readout::MaxPool,
        other => return Err(CliError::Validation(format!("unknown readout {other:?}"))),
    };
    // The embedding dimension comes from the vector files.
    let mut config = ModelConfig {
        embedding_dim: 1,
        hidden: file.or(a.hidden, "hidden", defaults.hidden)?,
        filters: file.or(a.filters, "filters", defaults.filters)?,
        window: file.or(a.window, "window", defaults.window)?,
        dropout: file.or(a.dropout, "dropout", defaults.dropout)?,
        readout,
    };
    config.validate()?;
    for path in &s.embeddings {
        require_file(path)?;
    }
    require_file(&s.data)?;
    let dims = s
        .embeddings
        .iter()
        .map(|p| vector_dim(p, &read_input(p)?))
        .collect::<Result<Vec<_>>>()?;
    config.embedding_dim = dims.iter().sum();
    #[derive(Serialize)]
    struct Settings<'a> {
        model: ModelKind,
        config: &'a ModelConfig,
        #[serde(flatten)]
        fit: &'a FitSettings,
    }
    echo(
        "train",
        &Settings {
            model: kind,
            config: &config,
            fit: &s,
        },
    );
    let model = Model::new(kind, config, s.train.seed)?;
    fit(&s, model, None)
}

fn transfer_train(a: &TransferTrainArgs, file: &FileConfig) -> Result<()> {
    let pretrained: PathBuf = file.required(a.pretrained.clone(), "pretrained")?;
    let s = fit_settings(&a.fit, file)?;
    check_output(&s.out, &[&pretrained])?;
    let bytes = std::fs::read(&pretrained).map_err(|e| {
        if pretrained.exists() {
            CliError::Runtime(format!("{}: {e}", pretrained.display()))
        } else {
            CliError::Validation(format!("input file {} does not exist", pretrained.display()))
        }
    })?;
    let source = Checkpoint::from_bytes(&bytes)?;
    for path in &s.embeddings {
        require_file(path)?;
    }
    require_file(&s.data)?;
    let dims = s
        .embeddings
        .iter()
        .map(|p| vector_dim(p, &read_input(p)?))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        embedding_dim: dims.iter().sum(),
        ..source.config.clone()
    };
    #[derive(Serialize)]
    struct Settings<'a> {
        pretrained: &'a Path,
        model: ModelKind,
        config: &'a ModelConfig,
        #[serde(flatten)]
        fit: &'a FitSettings,
    }
    echo(
        "transfer-train",
        &Settings {
            pretrained: &pretrained,
            model: source.kind,
            config: &config,
            fit: &s,
        },
    );
    let target = Model::new(source.kind, config, s.train.seed)?;
    let (model, report) = transfer_weights(&source, target)?;
    log::info!(
        "transferred: {} copied, {} extended, {} left at initial values",
        report.copied.len(),
        report.extended.len(),
        report.skipped.len()
    );
    fit(&s, model, Some(report))
}

fn evaluate(a: &EvaluateArgs, file: &FileConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Settings {
        model: String,
        data: PathBuf,
        checkpoint: Option<PathBuf>,
        embeddings: Option<Vec<PathBuf>>,
        split: String,
        translation: Option<String>,
        max_question_len: usize,
        max_answer_len: usize,
        out: Option<PathBuf>,
        seed: u64,
    }
    let s = Settings {
        model: file.required(a.model.clone(), "model")?,
        data: file.required(a.data.clone(), "data")?,
        checkpoint: file.opt(a.checkpoint.clone(), "checkpoint")?,
        embeddings: file.opt(a.embeddings.clone(), "embeddings")?,
        split: file.or(a.split.clone(), "split", "all".into())?,
        translation: file.opt(a.translation.clone(), "translation")?,
        max_question_len: file.or(a.max_question_len, "max_question_len", Featurizer::DEFAULT_QUESTION_LEN)?,
        max_answer_len: file.or(a.max_answer_len, "max_answer_len", Featurizer::DEFAULT_ANSWER_LEN)?,
        out: file.opt(a.out.clone(), "out")?,
        seed: file.or(a.seed, "seed", 1)?,
    };
    echo("evaluate", &s);
    if let Some(out) = &s.out {
        let mut inputs: Vec<&Path> = vec![&s.data];
        inputs.extend(s.checkpoint.as_deref());
        check_output(out, &inputs)?;
    }
    let groups = load_groups(&s.data, s.translation.as_deref())?;
    let groups = match s.split.as_str() {
        "all" => groups,
        "test" => split_dataset(&groups, s.seed)?.test,
        other => return Err(CliError::Validation(format!("unknown split {other:?}"))),
    };

    let preds = if s.model == "baseline" {
        random_baseline(&groups, s.seed)?
    } else {
        let kind = parse_value::<ModelKind>(&s.model, "model")?;
        let ckpt_path = file.required(s.checkpoint.clone(), "checkpoint")?;
        let emb_paths = file.required(s.embeddings.clone(), "embeddings")?;
        let model = load_model(&ckpt_path)?;
        if model.kind() != kind {
            return Err(CliError::Validation(format!(
                "{} holds a {} model, not {kind}",
                ckpt_path.display(),
                model.kind()
            )));
        }
        let embeddings = load_embeddings(&emb_paths)?;
        let featurizer = Featurizer {
            embeddings: &embeddings,
            max_question_len: s.max_question_len,
            max_answer_len: s.max_answer_len,
        };
        let scores = training::score_groups(&model, &featurizer.prepare_all(&groups))?;
        PredictionSet::from_groups(&groups, scores)?
    };
    let eval = evaluation::evaluate(&preds)?;
    log::info!("{} questions: f1 {:.4}, mrr {:.4}", eval.n, eval.f1, eval.mrr);
    let report = Report::new(s.model.clone(), &s.data, s.translation.as_deref(), s.seed, &eval);
    emit(s.out.as_deref(), &report.to_bytes())
}

fn load_model(path: &Path) -> Result<Model> {
    require_file(path)?;
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    load_checkpoint(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn parse_verse_range(s: &str, len: usize) -> Result<std::ops::RangeInclusive<usize>> {
    let bad = || CliError::Validation(format!("invalid verse range {s:?} for a chapter of {len} verses"));
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let v: usize = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if a == 0 || a > b || b > len {
        return Err(bad());
    }
    Ok(a..=b)
}

fn predict(a: &PredictArgs, file: &FileConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Settings {
        checkpoint: PathBuf,
        embeddings: Vec<PathBuf>,
        bible: PathBuf,
        translation: String,
        book: String,
        chapter: u32,
        verses: Option<String>,
        question: String,
        max_question_len: usize,
        max_answer_len: usize,
        out: Option<PathBuf>,
    }
    let s = Settings {
        checkpoint: file.required(a.checkpoint.clone(), "checkpoint")?,
        embeddings: file.required(a.embeddings.clone(), "embeddings")?,
        bible: file.required(a.bible.clone(), "bible")?,
        translation: file.or(a.translation.clone(), "translation", "KJV".into())?,
        book: file.required(a.book.clone(), "book")?,
        chapter: file.required(a.chapter, "chapter")?,
        verses: file.opt(a.verses.clone(), "verses")?,
        question: file.required(a.question.clone(), "question")?,
        max_question_len: file.or(a.max_question_len, "max_question_len", Featurizer::DEFAULT_QUESTION_LEN)?,
        max_answer_len: file.or(a.max_answer_len, "max_answer_len", Featurizer::DEFAULT_ANSWER_LEN)?,
        out: file.opt(a.out.clone(), "out")?,
    };
    echo("predict", &s);
    let translation = parse_value::<Translation>(&s.translation, "translation")?;
    let model = load_model(&s.checkpoint)?;
    let embeddings = load_embeddings(&s.embeddings)?;
    let corpus = parse_bible(open_input(&s.bible)?)?;
    let verses = corpus.chapter(translation, &s.book, s.chapter).ok_or_else(|| {
        CliError::Validation(format!("{} {} not found in {translation}", s.book, s.chapter))
    })?;
    let range = match &s.verses {
        Some(r) => parse_verse_range(r, verses.len())?,
        None => 1..=verses.len(),
    };
    let featurizer = Featurizer {
        embeddings: &embeddings,
        max_question_len: s.max_question_len,
        max_answer_len: s.max_answer_len,
    };
    let question = featurizer.question(&s.question);
    let candidates: Vec<_> = range.clone().map(|v| featurizer.answer(&verses[v - 1])).collect();
    let scores = model.score_candidates(&question, &candidates)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]));

    #[derive(Serialize)]
    struct Line<'a> {
        rank: usize,
        verse: usize,
        score: f64,
        text: &'a str,
    }
    let mut buf = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let verse = range.start() + i;
        let line = Line {
            rank: rank + 1,
            verse,
            score: scores[i],
            text: &verses[verse - 1],
        };
        serde_json::to_writer(&mut buf, &line).expect("line serializes");
        buf.push(b'\n');
    }
    emit(s.out.as_deref(), &buf)
}

fn nearest(a: &NearestArgs, file: &FileConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Settings {
        embeddings: Vec<PathBuf>,
        word: String,
        k: usize,
    }
    let s = Settings {
        embeddings: file.required(a.embeddings.clone(), "embeddings")?,
        word: file.required(a.word.clone(), "word")?,
        k: file.or(a.k, "k", 10)?,
    };
    echo("nearest", &s);
    let m = load_embeddings(&s.embeddings)?;
    let word = s.word.to_lowercase();
    let mut buf = String::new();
    for (w, sim) in nearest_neighbors(&word, &m, s.k)? {
        buf.push_str(&format!("{w}\t{sim:.6}\n"));
    }
    emit(None, buf.as_bytes())
}
