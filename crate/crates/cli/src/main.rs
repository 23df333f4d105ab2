//! `nergen`: the pipeline binary.
//!
//! Subcommands cover the whole workflow: corpus synthesis, BPE vocabulary
//! training, linearization dumps, model training (pointer generator or the
//! BIO tagger baselines), prediction, evaluation, and analysis exports.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad data, bad config,
//! missing files), 2 on usage errors (clap's default).

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use nergen_core::baseline::{prepare_bio, train_baseline, BaselineConfig, BaselineModel};
use nergen_core::checkpoint::{
    load_baseline, load_model, peek_kind, save_baseline, save_model, CheckpointMeta, KIND_POINTER,
    KIND_TAGGER, KIND_TAGGER_CRF,
};
use nergen_core::corpus::{read_conll, read_jsonl, write_jsonl, BioMode, Dataset, Entity};
use nergen_core::generator::{predict_sentence, GenConfig, PredictionRecord};
use nergen_core::linearizer::{linearize, InvalidCounts, Scheme, ValidationOptions};
use nergen_core::metrics::{self, EvalReport};
use nergen_core::model::{ModelConfig, PointerModel};
use nergen_core::synth::{self, PatternFamily, SynthConfig};
use nergen_core::tokenizer::{
    passthrough_vocab, tokenize_sentence, train_bpe, BpeVocab, TokenizedSentence,
};
use nergen_core::trainer::{prepare, train, write_log_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "nergen", version, about = "Generative NER at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a BPE vocabulary from a corpus.
    BpeTrain(BpeTrainArgs),
    /// Dump linearized target sequences for inspection.
    Linearize(LinearizeArgs),
    /// Train a model and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Run a trained model over a corpus and write prediction records.
    Predict(PredictArgs),
    /// Score predictions against gold annotations.
    Evaluate(EvaluateArgs),
    /// Export the position-recall curve as CSV.
    Analyze(AnalyzeArgs),
    /// Report gold representation lengths under a scheme.
    Stats(StatsArgs),
    /// Generate a seeded synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Jsonl,
    Conll,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Span,
    Bpe,
    Word,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Span => Scheme::Span,
            SchemeArg::Bpe => Scheme::Bpe,
            SchemeArg::Word => Scheme::Word,
        }
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Span => "span",
        Scheme::Bpe => "bpe",
        Scheme::Word => "word",
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Pointer,
    Tagger,
    TaggerCrf,
}

impl ModelKind {
    fn checkpoint_kind(self) -> &'static str {
        match self {
            ModelKind::Pointer => KIND_POINTER,
            ModelKind::Tagger => KIND_TAGGER,
            ModelKind::TaggerCrf => KIND_TAGGER_CRF,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Flat,
    Nested,
    Discontinuous,
}

impl From<FamilyArg> for PatternFamily {
    fn from(f: FamilyArg) -> PatternFamily {
        match f {
            FamilyArg::Flat => PatternFamily::Flat,
            FamilyArg::Nested => PatternFamily::Nested,
            FamilyArg::Discontinuous => PatternFamily::Discontinuous,
        }
    }
}

/// Shared flags for commands that read an annotated corpus.
#[derive(Args)]
struct CorpusArgs {
    /// Corpus file to read.
    #[arg(long)]
    input: PathBuf,
    /// Corpus file format.
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
    /// Error on dangling I- tags instead of reading them as entity starts.
    #[arg(long)]
    strict_bio: bool,
}

#[derive(Args)]
struct BpeTrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Number of merge rounds; 0 gives a character-level vocabulary.
    #[arg(long, default_value_t = 100)]
    merges: usize,
    /// Make every distinct word a single piece instead of merging.
    #[arg(long)]
    passthrough: bool,
    /// Where to write the vocabulary JSON.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct LinearizeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Vocabulary JSON; omitted means pass-through over the corpus words.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Held-out corpus for per-epoch evaluation and best-model selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelKind::Pointer)]
    model: ModelKind,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Vocabulary JSON; omitted means pass-through over the training words.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long)]
    output: PathBuf,
    /// Per-epoch training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON config file with flat keys; flags override its values. The
    /// NERGEN_CONFIG environment variable supplies the path when this flag
    /// is absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_positions: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Trained checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Expected model kind; errors if the checkpoint holds another.
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Output JSONL of prediction records; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Vocabulary JSON; defaults to the checkpoint's embedded vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Beam width; 1 is greedy.
    #[arg(long)]
    beam: Option<usize>,
    /// Generation length cap; default 2n+10 per sentence.
    #[arg(long)]
    max_len: Option<usize>,
    /// Require Span-scheme end pointers on word-final pieces instead of
    /// snapping outward.
    #[arg(long)]
    strict_span_ends: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction records (or a plain annotated corpus) to score.
    #[arg(
        long,
        required_unless_present = "checkpoint",
        conflicts_with = "checkpoint"
    )]
    pred: Option<PathBuf>,
    /// Score a checkpoint directly: predict in-process, then evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Expected model kind for --checkpoint.
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Gold corpus.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
    #[arg(long)]
    strict_bio: bool,
    /// Vocabulary JSON; defaults to the checkpoint's embedded vocabulary,
    /// else pass-through over the gold words.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Scheme for length stats; defaults to the checkpoint's scheme, else
    /// word.
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Beam width for --checkpoint predictions.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Report JSON path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Prediction records (or a plain annotated corpus) to score.
    #[arg(long)]
    pred: PathBuf,
    /// Gold corpus.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
    #[arg(long)]
    strict_bio: bool,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum)]
    scheme: SchemeArg,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// JSON path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    sentences: usize,
    /// Total word budget shared across the pattern families.
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    /// Pattern families to draw from.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FamilyArg::Flat, FamilyArg::Nested, FamilyArg::Discontinuous])]
    families: Vec<FamilyArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Anything that should terminate with exit code 1 and a message.
#[derive(Debug)]
struct CliError(String);

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn fail<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // a closed stdout (| head) is not a failure
        Err(e) if e.0.contains("Broken pipe") => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::BpeTrain(args) => cmd_bpe_train(args),
        Command::Linearize(args) => cmd_linearize(args),
        Command::Train(args) => cmd_train(*args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

// ---------------------------------------------------------------- plumbing

fn read_dataset(path: &Path, format: FormatArg, strict_bio: bool) -> CliResult<Dataset> {
    let file =
        File::open(path).map_err(|e| CliError(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let dataset = match format {
        FormatArg::Jsonl => read_jsonl(reader)?,
        FormatArg::Conll => {
            let mode = if strict_bio {
                BioMode::Strict
            } else {
                BioMode::Lenient
            };
            read_conll(reader, mode)?
        }
    };
    Ok(dataset)
}

fn load_vocab(path: &Path) -> CliResult<BpeVocab> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError(format!("cannot read {}: {e}", path.display())))?;
    Ok(BpeVocab::from_json(&text)?)
}

/// Explicit vocabulary file, else pass-through over the dataset's words.
fn vocab_or_passthrough(path: Option<&Path>, dataset: &Dataset) -> CliResult<BpeVocab> {
    match path {
        Some(p) => load_vocab(p),
        None => Ok(passthrough_vocab(
            dataset.sentences.iter().flat_map(|s| s.words.iter()),
        )?),
    }
}

fn tokenize_all(vocab: &BpeVocab, dataset: &Dataset) -> CliResult<Vec<TokenizedSentence>> {
    dataset
        .sentences
        .iter()
        .map(|s| tokenize_sentence(vocab, &s.words).map_err(CliError::from))
        .collect()
}

/// Writer for `--output`; stdout when absent.
fn open_out(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match path {
        Some(p) => {
            let file = File::create(p)
                .map_err(|e| CliError(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

/// Flat-key JSON config file. Flags override; keys the command does not
/// know are rejected up front so typos fail loudly.
struct ConfigFile {
    map: Map<String, Value>,
}

impl ConfigFile {
    fn load(flag: Option<&Path>, known: &[&str]) -> CliResult<Self> {
        let path = match flag {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os("NERGEN_CONFIG").map(PathBuf::from),
        };
        let map = match path {
            Some(p) => {
                let text = fs::read_to_string(&p)
                    .map_err(|e| CliError(format!("cannot read {}: {e}", p.display())))?;
                let value: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError(format!("{}: {e}", p.display())))?;
                match value {
                    Value::Object(map) => map,
                    _ => return fail(format!("{}: config must be a JSON object", p.display())),
                }
            }
            None => Map::new(),
        };
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                return fail(format!("unknown config key {key:?}"));
            }
        }
        Ok(ConfigFile { map })
    }

    fn usize(&self, key: &str, flag: Option<usize>, default: usize) -> CliResult<usize> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().map(|v| v as usize).ok_or_else(|| {
                CliError(format!("config key {key:?} must be a non-negative integer"))
            }),
        }
    }

    fn f64(&self, key: &str, flag: Option<f64>, default: f64) -> CliResult<f64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| CliError(format!("config key {key:?} must be a number"))),
        }
    }

    fn u64(&self, key: &str, flag: Option<u64>, default: u64) -> CliResult<u64> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().ok_or_else(|| {
                CliError(format!("config key {key:?} must be a non-negative integer"))
            }),
        }
    }

    fn scheme(&self, key: &str, flag: Option<SchemeArg>, default: Scheme) -> CliResult<Scheme> {
        if let Some(v) = flag {
            return Ok(v.into());
        }
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => serde_json::from_value(v.clone()).map_err(|_| {
                CliError(format!("config key {key:?} must be one of span, bpe, word"))
            }),
        }
    }
}

// ---------------------------------------------------------------- commands

fn cmd_bpe_train(args: BpeTrainArgs) -> CliResult<()> {
    let dataset = read_dataset(
        &args.corpus.input,
        args.corpus.format,
        args.corpus.strict_bio,
    )?;
    let words = dataset.sentences.iter().flat_map(|s| s.words.iter());
    let vocab = if args.passthrough {
        passthrough_vocab(words)?
    } else {
        train_bpe(words, args.merges)?
    };
    fs::write(&args.output, vocab.to_json())
        .map_err(|e| CliError(format!("cannot write {}: {e}", args.output.display())))?;
    Ok(())
}

fn cmd_linearize(args: LinearizeArgs) -> CliResult<()> {
    let dataset = read_dataset(
        &args.corpus.input,
        args.corpus.format,
        args.corpus.strict_bio,
    )?;
    let vocab = vocab_or_passthrough(args.vocab.as_deref(), &dataset)?;
    let scheme: Scheme = args.scheme.into();
    let mut out = open_out(args.output.as_deref())?;
    for raw in &dataset.sentences {
        let sent = tokenize_sentence(&vocab, &raw.words)?;
        let seq = linearize(&sent, &raw.entities, &dataset.tags, scheme)?;
        let line = json!({ "indexes": seq.indexes, "n": seq.n });
        writeln!(out, "{line}").map_err(CliError::from)?;
    }
    out.flush()?;
    Ok(())
}

const TRAIN_CONFIG_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "warmup",
    "clip_norm",
    "eval_every",
    "scheme",
    "d",
    "enc_layers",
    "dec_layers",
    "heads",
    "ffn_size",
    "alpha",
    "dropout",
    "max_positions",
];

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let dataset = read_dataset(
        &args.corpus.input,
        args.corpus.format,
        args.corpus.strict_bio,
    )?;
    let dev = args
        .dev
        .as_deref()
        .map(|p| read_dataset(p, args.corpus.format, args.corpus.strict_bio))
        .transpose()?;
    let vocab = vocab_or_passthrough(args.vocab.as_deref(), &dataset)?;
    let file = ConfigFile::load(args.config.as_deref(), TRAIN_CONFIG_KEYS)?;

    let seed = file.u64("seed", args.seed, 0)?;
    let scheme = file.scheme("scheme", args.scheme, Scheme::Word)?;
    let mut cfg = TrainConfig::desk(scheme);
    cfg.seed = seed;
    cfg.epochs = file.usize("epochs", args.epochs, cfg.epochs)?;
    cfg.batch_size = file.usize("batch_size", args.batch_size, cfg.batch_size)?;
    cfg.lr = file.f64("lr", args.lr, cfg.lr)?;
    cfg.warmup = file.f64("warmup", args.warmup, cfg.warmup)?;
    cfg.clip_norm = file.f64("clip_norm", args.clip_norm, cfg.clip_norm)?;
    cfg.eval_every = file.usize("eval_every", args.eval_every, cfg.eval_every)?;

    // model shape; vocab_size is derived, never a knob
    let defaults = ModelConfig::small(0);
    let d = file.usize("d", args.d, defaults.d)?;
    let enc_layers = file.usize("enc_layers", args.enc_layers, defaults.enc_layers)?;
    let dec_layers = file.usize("dec_layers", args.dec_layers, defaults.dec_layers)?;
    let heads = file.usize("heads", args.heads, defaults.heads)?;
    let ffn_size = file.usize("ffn_size", args.ffn_size, defaults.ffn_size)?;
    let alpha = file.f64("alpha", args.alpha, defaults.alpha)?;
    let dropout = file.f64("dropout", args.dropout, defaults.dropout)?;
    let max_positions = file.usize("max_positions", args.max_positions, defaults.max_positions)?;

    let effective = json!({
        "model": match args.model {
            ModelKind::Pointer => "pointer",
            ModelKind::Tagger => "tagger",
            ModelKind::TaggerCrf => "tagger-crf",
        },
        "scheme": scheme_name(scheme),
        "seed": seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "warmup": cfg.warmup,
        "clip_norm": cfg.clip_norm,
        "eval_every": cfg.eval_every,
        "d": d,
        "enc_layers": enc_layers,
        "dec_layers": dec_layers,
        "heads": heads,
        "ffn_size": ffn_size,
        "alpha": alpha,
        "dropout": dropout,
        "max_positions": max_positions,
        "optimizer": { "beta1": cfg.beta1, "beta2": cfg.beta2, "eps": cfg.adam_eps },
    });
    let vocab_value: Value = serde_json::from_str(&vocab.to_json())?;
    let extra = json!({ "config": effective, "vocab": vocab_value });

    match args.model {
        ModelKind::Pointer => {
            let prepared = prepare(&dataset, &vocab, scheme)?;
            let dev_prepared = dev
                .as_ref()
                .map(|d| prepare(d, &vocab, scheme))
                .transpose()?;
            let model_cfg = ModelConfig {
                d,
                enc_layers,
                dec_layers,
                heads,
                ffn_size,
                vocab_size: vocab.num_pieces() + prepared.tags.len() + 2,
                alpha,
                dropout,
                max_positions,
            };
            let model = PointerModel::new(model_cfg, seed)?;
            let outcome = train(model, &prepared, dev_prepared.as_ref(), &cfg)?;
            if let Some(log_path) = &args.log {
                let file = File::create(log_path)
                    .map_err(|e| CliError(format!("cannot create {}: {e}", log_path.display())))?;
                write_log_csv(BufWriter::new(file), &outcome.log)?;
            }
            let meta = CheckpointMeta {
                scheme,
                tags: prepared.tags.clone(),
                extra,
            };
            save_model(&args.output, &outcome.model, &meta)?;
        }
        ModelKind::Tagger | ModelKind::TaggerCrf => {
            let prepared = prepare_bio(&dataset, &vocab)?;
            let dev_prepared = dev.as_ref().map(|d| prepare_bio(d, &vocab)).transpose()?;
            let model_cfg = BaselineConfig {
                d,
                enc_layers,
                heads,
                ffn_size,
                vocab_size: vocab.num_pieces(),
                dropout,
                max_positions,
                crf: args.model == ModelKind::TaggerCrf,
            };
            let model = BaselineModel::new(model_cfg, prepared.labels.clone(), seed)?;
            let outcome = train_baseline(model, &prepared, dev_prepared.as_ref(), &cfg)?;
            if let Some(log_path) = &args.log {
                let file = File::create(log_path)
                    .map_err(|e| CliError(format!("cannot create {}: {e}", log_path.display())))?;
                write_log_csv(BufWriter::new(file), &outcome.log)?;
            }
            let meta = CheckpointMeta {
                scheme,
                tags: prepared.tags.clone(),
                extra,
            };
            save_baseline(&args.output, &outcome.model, &meta)?;
        }
    }
    Ok(())
}

/// The checkpoint self-describes its kind; `--model` is an assertion.
fn check_kind(path: &Path, expected: Option<ModelKind>) -> CliResult<String> {
    let kind = peek_kind(path)?;
    if let Some(want) = expected {
        if kind != want.checkpoint_kind() {
            return fail(format!(
                "checkpoint {} holds a {kind} model, not {}",
                path.display(),
                want.checkpoint_kind()
            ));
        }
    }
    Ok(kind)
}

/// Vocabulary embedded in the checkpoint at training time.
fn embedded_vocab(extra: &Value) -> CliResult<BpeVocab> {
    let value = extra
        .get("vocab")
        .ok_or_else(|| CliError("checkpoint carries no vocabulary".into()))?;
    Ok(BpeVocab::from_json(&serde_json::to_string(value)?)?)
}

const PREDICT_CONFIG_KEYS: &[&str] = &["beam", "max_len"];

fn cmd_predict(args: PredictArgs) -> CliResult<()> {
    let kind = check_kind(&args.checkpoint, args.model)?;
    let dataset = read_dataset(
        &args.corpus.input,
        args.corpus.format,
        args.corpus.strict_bio,
    )?;
    let file = ConfigFile::load(args.config.as_deref(), PREDICT_CONFIG_KEYS)?;
    let beam = file.usize("beam", args.beam, 1)?;
    if beam == 0 {
        return fail("beam must be at least 1");
    }
    let max_len = match args.max_len {
        Some(v) => Some(v),
        None => match file.map.get("max_len") {
            None => None,
            Some(v) => Some(v.as_u64().map(|v| v as usize).ok_or_else(|| {
                CliError("config key \"max_len\" must be a non-negative integer".into())
            })?),
        },
    };

    let mut out = open_out(args.output.as_deref())?;
    if kind == KIND_POINTER {
        let (model, meta) = load_model(&args.checkpoint)?;
        let vocab = match &args.vocab {
            Some(p) => load_vocab(p)?,
            None => embedded_vocab(&meta.extra)?,
        };
        let gen_cfg = GenConfig { beam, max_len };
        let opts = ValidationOptions {
            strict_span_ends: args.strict_span_ends,
        };
        for raw in &dataset.sentences {
            let sent = tokenize_sentence(&vocab, &raw.words)?;
            let record = predict_sentence(&model, &sent, &meta.tags, meta.scheme, &gen_cfg, opts)?;
            writeln!(out, "{}", serde_json::to_string(&record)?)?;
        }
    } else {
        let (model, meta) = load_baseline(&args.checkpoint)?;
        let vocab = match &args.vocab {
            Some(p) => load_vocab(p)?,
            None => embedded_vocab(&meta.extra)?,
        };
        for raw in &dataset.sentences {
            let sent = tokenize_sentence(&vocab, &raw.words)?;
            let record = PredictionRecord {
                indexes: model.predict_labels(&sent)?,
                entities: model.predict_entities(&sent)?,
                invalid: InvalidCounts::default(),
            };
            writeln!(out, "{}", serde_json::to_string(&record)?)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-sentence predictions plus the pre-filter counts evaluation reports on.
struct Predictions {
    entities: Vec<Vec<Entity>>,
    invalid: InvalidCounts,
    /// Entities decoded before invalid filtering (valid + E1 + E2 + E3).
    decoded: usize,
}

/// Reads either prediction records or a plain annotated corpus; the two are
/// told apart by the presence of a "tokens" key on the first object.
fn read_predictions(path: &Path) -> CliResult<Predictions> {
    let file =
        File::open(path).map_err(|e| CliError(format!("cannot open {}: {e}", path.display())))?;
    let mut entities = Vec::new();
    let mut invalid = InvalidCounts::default();
    let mut decoded = 0usize;
    let mut corpus_format: Option<bool> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| CliError(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        let is_corpus = *corpus_format.get_or_insert_with(|| value.get("tokens").is_some());
        if is_corpus != value.get("tokens").is_some() {
            return fail(format!(
                "{}:{}: mixed corpus and prediction-record lines",
                path.display(),
                idx + 1
            ));
        }
        let set: Vec<Entity> =
            serde_json::from_value(value.get("entities").cloned().ok_or_else(|| {
                CliError(format!("{}:{}: missing entities", path.display(), idx + 1))
            })?)
            .map_err(|e| CliError(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        decoded += set.len();
        if !is_corpus {
            if let Some(counts) = value.get("invalid") {
                let counts: InvalidCounts = serde_json::from_value(counts.clone())
                    .map_err(|e| CliError(format!("{}:{}: {e}", path.display(), idx + 1)))?;
                decoded += counts.total();
                invalid.add(&counts);
            }
        }
        entities.push(set);
    }
    Ok(Predictions {
        entities,
        invalid,
        decoded,
    })
}

/// Shared evaluation assembly for `evaluate` and `analyze`.
struct Scored {
    report: EvalReport,
    config: Value,
}

fn score(args: &EvaluateArgs) -> CliResult<Scored> {
    let gold = read_dataset(&args.gold, args.format, args.strict_bio)?;

    let (pred, vocab, scheme, source) = match (&args.pred, &args.checkpoint) {
        (Some(pred_path), None) => {
            let pred = read_predictions(pred_path)?;
            let vocab = vocab_or_passthrough(args.vocab.as_deref(), &gold)?;
            let scheme = args.scheme.map(Scheme::from).unwrap_or(Scheme::Word);
            (pred, vocab, scheme, json!(pred_path.display().to_string()))
        }
        (None, Some(ckpt_path)) => {
            let kind = check_kind(ckpt_path, args.model)?;
            let (pred, meta, vocab) = if kind == KIND_POINTER {
                let (model, meta) = load_model(ckpt_path)?;
                let vocab = match &args.vocab {
                    Some(p) => load_vocab(p)?,
                    None => embedded_vocab(&meta.extra)?,
                };
                let gen_cfg = GenConfig {
                    beam: args.beam,
                    max_len: None,
                };
                let opts = ValidationOptions::default();
                let mut entities = Vec::new();
                let mut invalid = InvalidCounts::default();
                let mut decoded = 0usize;
                for raw in &gold.sentences {
                    let sent = tokenize_sentence(&vocab, &raw.words)?;
                    let record =
                        predict_sentence(&model, &sent, &meta.tags, meta.scheme, &gen_cfg, opts)?;
                    decoded += record.entities.len() + record.invalid.total();
                    invalid.add(&record.invalid);
                    entities.push(record.entities);
                }
                (
                    Predictions {
                        entities,
                        invalid,
                        decoded,
                    },
                    meta,
                    vocab,
                )
            } else {
                let (model, meta) = load_baseline(ckpt_path)?;
                let vocab = match &args.vocab {
                    Some(p) => load_vocab(p)?,
                    None => embedded_vocab(&meta.extra)?,
                };
                let mut entities = Vec::new();
                let mut decoded = 0usize;
                for raw in &gold.sentences {
                    let sent = tokenize_sentence(&vocab, &raw.words)?;
                    let set = model.predict_entities(&sent)?;
                    decoded += set.len();
                    entities.push(set);
                }
                (
                    Predictions {
                        entities,
                        invalid: InvalidCounts::default(),
                        decoded,
                    },
                    meta,
                    vocab,
                )
            };
            let scheme = args.scheme.map(Scheme::from).unwrap_or(meta.scheme);
            (pred, vocab, scheme, json!(ckpt_path.display().to_string()))
        }
        _ => return fail("exactly one of --pred and --checkpoint is required"),
    };

    if pred.entities.len() != gold.sentences.len() {
        return fail(format!(
            "prediction count {} does not match gold sentence count {}",
            pred.entities.len(),
            gold.sentences.len()
        ));
    }
    let sents = tokenize_all(&vocab, &gold)?;
    let gold_entities: Vec<Vec<Entity>> =
        gold.sentences.iter().map(|s| s.entities.clone()).collect();
    let report = metrics::evaluate(
        &pred.entities,
        &gold_entities,
        &sents,
        &gold.tags,
        scheme,
        &pred.invalid,
        pred.decoded,
    )?;
    let config = json!({
        "pred": source,
        "gold": args.gold.display().to_string(),
        "scheme": scheme_name(scheme),
        "beam": if args.checkpoint.is_some() { json!(args.beam) } else { Value::Null },
    });
    Ok(Scored { report, config })
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let scored = score(&args)?;
    let mut value = serde_json::to_value(&scored.report)?;
    value
        .as_object_mut()
        .expect("report serializes to an object")
        .insert("config".into(), scored.config);
    let mut out = open_out(args.output.as_deref())?;
    writeln!(out, "{}", serde_json::to_string_pretty(&value)?)?;
    out.flush()?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult<()> {
    let scored = score(&EvaluateArgs {
        pred: Some(args.pred),
        checkpoint: None,
        model: None,
        gold: args.gold,
        format: args.format,
        strict_bio: args.strict_bio,
        vocab: args.vocab,
        scheme: None,
        beam: 1,
        output: None,
    })?;
    let mut out = open_out(args.output.as_deref())?;
    writeln!(out, "bucket,count,recall")?;
    for row in &scored.report.position_recall {
        writeln!(out, "{},{},{}", row.bucket, row.total, row.recall)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> CliResult<()> {
    let dataset = read_dataset(
        &args.corpus.input,
        args.corpus.format,
        args.corpus.strict_bio,
    )?;
    let vocab = vocab_or_passthrough(args.vocab.as_deref(), &dataset)?;
    let scheme: Scheme = args.scheme.into();
    let sents = tokenize_all(&vocab, &dataset)?;
    let entities: Vec<Vec<Entity>> = dataset
        .sentences
        .iter()
        .map(|s| s.entities.clone())
        .collect();
    let stats = metrics::length_stats(&sents, &entities, &dataset.tags, scheme)?;
    let value = json!({
        "scheme": scheme_name(scheme),
        "mean": stats.mean,
        "median": stats.median,
        "entities": stats.entities,
        "config": {
            "input": args.corpus.input.display().to_string(),
            "scheme": scheme_name(scheme),
        },
    });
    let mut out = open_out(args.output.as_deref())?;
    writeln!(out, "{}", serde_json::to_string_pretty(&value)?)?;
    out.flush()?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let mut families: Vec<PatternFamily> = args.families.iter().map(|&f| f.into()).collect();
    families.dedup();
    let cfg = SynthConfig {
        sentences: args.sentences,
        vocab_size: args.vocab_size,
        families,
        seed: args.seed,
    };
    let dataset = synth::generate(&cfg)?;
    let mut out = open_out(args.output.as_deref())?;
    write_jsonl(&mut out, &dataset)?;
    out.flush()?;
    Ok(())
}
