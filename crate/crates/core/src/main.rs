//! Command-line entry point: corpus generation, feature extraction,
//! training, evaluation, hyperparameter search, and plan disambiguation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use prosotag::corpus::{
    self, split_by_instruction, CorpusError, Label, RenderMode, SplitSpec, UtteranceSample,
};
use prosotag::embed::{EmbedError, EmbeddingSource, DEFAULT_D_EMBED};
use prosotag::llm::{
    self, DisambiguationQuery, HttpConfig, LlmError, Transport, PAPER_REFERENCE,
};
use prosotag::model::{
    load_checkpoint, save_checkpoint, BiLstmConfig, BiLstmTagger, CheckpointMeta, ModelError,
    Tagger, TransformerConfig, TransformerTagger,
};
use prosotag::speech::{
    extract_prosody, extract_raw, read_wav_mono, FeatureMode, SpeechError, WordAlignment,
    PROSODY_DIM, RAW_DIM,
};
use prosotag::train::{
    self, ClassMetrics, MetricsReport, ReportEntry, SchedulerConfig, SearchSpace, TrainConfig,
    TrainError, TrialPoint,
};

/// Instruction fractions reproducing the canonical 1056/264/220 split at
/// 35 instructions.
const SPLIT_FRACS: (f64, f64, f64) = (24.0 / 35.0, 6.0 / 35.0, 5.0 / 35.0);

#[derive(Parser)]
#[command(name = "prosotag", version, about = "Prosody-driven intent tagging and task-plan disambiguation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ambiguous-instruction corpus.
    GenData(GenDataArgs),
    /// Recompute word features from WAV audio plus alignments.
    Extract(ExtractArgs),
    /// Train a tagger and write a checkpoint plus training history.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-class metrics CSV.
    Eval(EvalArgs),
    /// Merge eval CSVs into one results table.
    Report(ReportArgs),
    /// Random hyperparameter search; writes a trials log.
    Search(SearchArgs),
    /// Run LLM task-plan selection over tagged instructions.
    Disambiguate(DisambiguateArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ArchArg {
    Bilstm,
    Transformer,
}

impl ArchArg {
    fn as_str(self) -> &'static str {
        match self {
            ArchArg::Bilstm => "bilstm",
            ArchArg::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RenderArg {
    Features,
    Audio,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn as_str(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaggerArg {
    /// Use the corpus gold labels as tags.
    Gold,
    /// Tag with a trained checkpoint.
    Checkpoint,
    /// All-O tags: the no-prosody baseline.
    None,
}

impl TaggerArg {
    fn as_str(self) -> &'static str {
        match self {
            TaggerArg::Gold => "gold",
            TaggerArg::Checkpoint => "checkpoint",
            TaggerArg::None => "none",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Mock,
    Http,
}

fn parse_features(s: &str) -> Result<FeatureMode, String> {
    FeatureMode::parse(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of distinct instruction templates.
    #[arg(long, default_value_t = 35)]
    instructions: usize,
    /// Number of synthetic speakers.
    #[arg(long, default_value_t = 22)]
    speakers: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// features = emit vectors directly; audio = synthesize WAVs first.
    #[arg(long, value_enum, default_value_t = RenderArg::Features)]
    render: RenderArg,
    /// Output corpus JSON-lines path.
    #[arg(long)]
    out: PathBuf,
    /// WAV + alignment directory (required with --render audio).
    #[arg(long)]
    audio_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Corpus JSON-lines with audio paths or ids resolvable in --audio-dir.
    #[arg(long)]
    data: PathBuf,
    /// Directory searched for <id>.wav / <id>.align.json when a sample
    /// carries no audio path.
    #[arg(long)]
    audio_dir: Option<PathBuf>,
    /// Output JSON-lines with prosody and raw features filled in.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    arch: ArchArg,
    /// prosody | raw | prosody+raw | none (text embeddings only).
    #[arg(long, default_value = "prosody", value_parser = parse_features)]
    features: FeatureMode,
    /// Corpus JSON-lines path.
    #[arg(long)]
    data: PathBuf,
    /// JSON file mirroring the training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// History CSV path (default: checkpoint path with .history.csv).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Text-embedding width.
    #[arg(long, default_value_t = DEFAULT_D_EMBED)]
    d_embed: usize,
    /// Seed of the deterministic pseudo-embedding table.
    #[arg(long, default_value_t = 42)]
    embed_seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// BiLSTM hidden width / Transformer model dim.
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Self-attention blocks after the BiLSTM encoder.
    #[arg(long)]
    attn_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus JSON-lines path.
    #[arg(long)]
    data: PathBuf,
    /// Which instruction-held-out split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Split seed; must match the training run.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Metrics CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row label in the CSV (default: the checkpoint architecture).
    #[arg(long)]
    model_name: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Eval CSVs to merge.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Merged table CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, value_enum)]
    arch: ArchArg,
    #[arg(long, default_value = "prosody", value_parser = parse_features)]
    features: FeatureMode,
    #[arg(long)]
    data: PathBuf,
    /// Random trials beyond the default point.
    #[arg(long, default_value_t = 8)]
    budget: usize,
    /// Trials log CSV output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_D_EMBED)]
    d_embed: usize,
    #[arg(long, default_value_t = 42)]
    embed_seed: u64,
    /// Epoch cap applied to every trial.
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    /// Skip the known-good default hyperparameter point.
    #[arg(long, default_value_t = false)]
    skip_defaults: bool,
}

#[derive(Args)]
struct DisambiguateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Tag source for the query transcripts.
    #[arg(long, value_enum, default_value_t = TaggerArg::Gold)]
    tagger: TaggerArg,
    /// Checkpoint path (required with --tagger checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TransportArg::Mock)]
    transport: TransportArg,
    /// Chat-completions endpoint URL (http transport).
    #[arg(long, default_value = "https://api.openai.com/v1/chat/completions")]
    endpoint: String,
    /// Model name sent to the endpoint (http transport).
    #[arg(long, default_value = "gpt-4o")]
    model: String,
    /// Environment variable holding the API key (http transport).
    #[arg(long, default_value = "LLM_API_KEY")]
    api_key_env: String,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    #[arg(long, default_value_t = 60)]
    timeout_s: u64,
    #[arg(long, default_value_t = 4)]
    max_concurrent: usize,
    /// In-context examples drawn from the training split.
    #[arg(long, default_value_t = 3)]
    examples: usize,
    /// Split providing the queries.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Per-query result CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Transport(String),
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Runtime(_) => 2,
            AppError::Transport(_) => 3,
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for AppError {
            fn from(e: $ty) -> Self {
                AppError::Runtime(e.to_string())
            }
        })*
    };
}
runtime_from!(CorpusError, SpeechError, TrainError, ModelError, EmbedError, std::io::Error, serde_json::Error);

impl From<LlmError> for AppError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Transport(m) => AppError::Transport(m),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Search(a) => cmd_search(a),
        Command::Disambiguate(a) => cmd_disambiguate(a),
    }
}

fn default_split(seed: u64) -> Result<SplitSpec, AppError> {
    Ok(SplitSpec::new(SPLIT_FRACS.0, SPLIT_FRACS.1, SPLIT_FRACS.2, seed)?)
}

fn print_config(value: serde_json::Value) {
    println!("config: {value}");
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), AppError> {
    let render = match a.render {
        RenderArg::Features => RenderMode::Features,
        RenderArg::Audio => {
            let dir = a.audio_dir.clone().ok_or_else(|| {
                AppError::Usage("--render audio requires --audio-dir".into())
            })?;
            RenderMode::Audio { dir }
        }
    };
    print_config(json!({
        "command": "gen-data",
        "instructions": a.instructions,
        "speakers": a.speakers,
        "seed": a.seed,
        "render": matches!(a.render, RenderArg::Audio).then_some("audio").unwrap_or("features"),
        "out": a.out,
    }));
    let samples = corpus::generate_corpus(a.instructions, a.speakers, a.seed, &render)?;
    corpus::serialize(&samples, &a.out)?;
    println!("{} samples written to {}", samples.len(), a.out.display());
    match split_by_instruction(&samples, &default_split(a.seed)?) {
        Ok((tr, va, te)) => println!(
            "split preview (seed {}): train {} / val {} / test {}",
            a.seed,
            tr.len(),
            va.len(),
            te.len()
        ),
        Err(e) => println!("split preview unavailable: {e}"),
    }
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<(), AppError> {
    print_config(json!({
        "command": "extract",
        "data": a.data,
        "audio_dir": a.audio_dir,
        "out": a.out,
    }));
    let mut samples = corpus::deserialize(&a.data)?;
    for s in &mut samples {
        let wav = match (&s.audio_path, &a.audio_dir) {
            (Some(p), _) => PathBuf::from(p),
            (None, Some(dir)) => dir.join(format!("{}.wav", s.id)),
            (None, None) => {
                return Err(AppError::Usage(format!(
                    "sample {} has no audio path; pass --audio-dir",
                    s.id
                )))
            }
        };
        let clip = read_wav_mono(&wav)?;
        let align = wav.with_extension("align.json");
        let words: Vec<WordAlignment> = if align.exists() {
            serde_json::from_str(&std::fs::read_to_string(&align)?)?
        } else {
            s.words.clone()
        };
        s.prosody = Some(extract_prosody(&clip, &words)?.iter().map(|p| p.to_vec()).collect());
        s.raw = Some(extract_raw(&clip, &words)?);
        s.words = words;
        s.audio_path = Some(wav.to_string_lossy().into_owned());
    }
    corpus::serialize(&samples, &a.out)?;
    println!("{} samples extracted to {}", samples.len(), a.out.display());
    Ok(())
}

/// JSON training-config file; every field optional, flags take precedence.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    lr: Option<f64>,
    weight_decay: Option<f64>,
    decoupled_weight_decay: Option<bool>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    clip_norm: Option<f64>,
    patience_early_stop: Option<usize>,
    scheduler: Option<SchedulerConfig>,
    hidden_dim: Option<usize>,
    num_layers: Option<usize>,
    num_heads: Option<usize>,
    attn_layers: Option<usize>,
    dropout: Option<f64>,
}

struct ModelSpec {
    hidden_dim: usize,
    num_layers: usize,
    num_heads: usize,
    attn_layers: usize,
    dropout: f64,
}

fn resolve_train_config(
    arch: ArchArg,
    file: &FileConfig,
    a: &TrainArgs,
) -> Result<(TrainConfig, ModelSpec), AppError> {
    let mut config = match arch {
        ArchArg::Bilstm => TrainConfig::bilstm_default(a.seed),
        ArchArg::Transformer => TrainConfig::transformer_default(a.seed),
    };
    let mut spec = match arch {
        ArchArg::Bilstm => {
            let d = BiLstmConfig::new(1);
            ModelSpec {
                hidden_dim: d.hidden_dim,
                num_layers: d.num_layers,
                num_heads: d.num_heads,
                attn_layers: d.attn_layers,
                dropout: d.dropout,
            }
        }
        ArchArg::Transformer => {
            let d = TransformerConfig::new(1);
            ModelSpec {
                hidden_dim: d.model_dim,
                num_layers: d.num_layers,
                num_heads: d.num_heads,
                attn_layers: d.num_layers,
                dropout: d.dropout,
            }
        }
    };
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    let set_u = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    // File first, then flags.
    set(&mut config.lr, file.lr);
    set(&mut config.weight_decay, file.weight_decay);
    if let Some(v) = file.decoupled_weight_decay {
        config.decoupled_weight_decay = v;
    }
    set_u(&mut config.batch_size, file.batch_size);
    set_u(&mut config.max_epochs, file.max_epochs);
    set(&mut config.clip_norm, file.clip_norm);
    set_u(&mut config.patience_early_stop, file.patience_early_stop);
    if let Some(s) = &file.scheduler {
        config.scheduler = s.clone();
    }
    set_u(&mut spec.hidden_dim, file.hidden_dim);
    set_u(&mut spec.num_layers, file.num_layers);
    set_u(&mut spec.num_heads, file.num_heads);
    set_u(&mut spec.attn_layers, file.attn_layers);
    set(&mut spec.dropout, file.dropout);

    set(&mut config.lr, a.lr);
    set(&mut config.weight_decay, a.weight_decay);
    set_u(&mut config.batch_size, a.batch_size);
    set_u(&mut config.max_epochs, a.max_epochs);
    set(&mut config.clip_norm, a.clip_norm);
    set_u(&mut config.patience_early_stop, a.patience);
    set_u(&mut spec.hidden_dim, a.hidden_dim);
    set_u(&mut spec.num_layers, a.layers);
    set_u(&mut spec.num_heads, a.heads);
    set_u(&mut spec.attn_layers, a.attn_layers);
    set(&mut spec.dropout, a.dropout);
    Ok((config, spec))
}

fn build_tagger(
    arch: ArchArg,
    input_dim: usize,
    spec: &ModelSpec,
    mode: FeatureMode,
    seed: u64,
) -> Result<(Tagger, serde_json::Value), AppError> {
    match arch {
        ArchArg::Bilstm => {
            let config = BiLstmConfig {
                hidden_dim: spec.hidden_dim,
                num_layers: spec.num_layers,
                num_heads: spec.num_heads,
                attn_layers: spec.attn_layers,
                dropout: spec.dropout,
                ..BiLstmConfig::new(input_dim)
            };
            let value = serde_json::to_value(&config)?;
            let _ = mode;
            Ok((Tagger::BiLstm(BiLstmTagger::new(config, seed)?), value))
        }
        ArchArg::Transformer => {
            let config = TransformerConfig {
                model_dim: spec.hidden_dim,
                num_layers: spec.num_layers,
                num_heads: spec.num_heads,
                ffn_dim: 4 * spec.hidden_dim,
                dropout: spec.dropout,
                ..TransformerConfig::new(input_dim)
            };
            let value = serde_json::to_value(&config)?;
            Ok((Tagger::Transformer(TransformerTagger::new(config, seed)?), value))
        }
    }
}

fn dim_breakdown(mode: FeatureMode, d_embed: usize) -> String {
    let parts: Vec<String> = match mode {
        FeatureMode::Prosody => vec![PROSODY_DIM.to_string(), d_embed.to_string()],
        FeatureMode::Raw => vec![RAW_DIM.to_string(), d_embed.to_string()],
        FeatureMode::ProsodyRaw => {
            vec![PROSODY_DIM.to_string(), RAW_DIM.to_string(), d_embed.to_string()]
        }
        FeatureMode::EmbedOnly => vec![d_embed.to_string()],
    };
    format!("{} = {}", parts.join("+"), mode.feature_dim(d_embed))
}

struct Splits {
    train: train::Dataset,
    val: train::Dataset,
    test: train::Dataset,
}

fn load_splits(
    data: &Path,
    seed: u64,
    mode: FeatureMode,
    source: &EmbeddingSource,
) -> Result<(Splits, prosotag::speech::Normalizer), AppError> {
    let samples = corpus::deserialize(data)?;
    let (tr, va, te) = split_by_instruction(&samples, &default_split(seed)?)?;
    let normalizer = corpus::fit_normalizer(&tr, mode, source)?;
    Ok((
        Splits {
            train: train::prepare(&tr, mode, source, Some(&normalizer))?,
            val: train::prepare(&va, mode, source, Some(&normalizer))?,
            test: train::prepare(&te, mode, source, Some(&normalizer))?,
        },
        normalizer,
    ))
}

fn cmd_train(a: TrainArgs) -> Result<(), AppError> {
    let file: FileConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => FileConfig::default(),
    };
    let (config, spec) = resolve_train_config(a.arch, &file, &a)?;
    let mode = a.features;
    let input_dim = mode.feature_dim(a.d_embed);

    let source = EmbeddingSource::pseudo(a.d_embed, a.embed_seed);
    let (splits, normalizer) = load_splits(&a.data, a.seed, mode, &source)?;
    let (mut tagger, model_value) = build_tagger(a.arch, input_dim, &spec, mode, a.seed)?;

    println!("arch = {}", a.arch.as_str());
    println!("features = {} (input_dim = {})", mode.name(), dim_breakdown(mode, a.d_embed));
    println!("lr = {:e}", config.lr);
    println!("weight_decay = {:e}", config.weight_decay);
    println!("dropout = {}", spec.dropout);
    println!("layers = {}", spec.num_layers);
    println!("hidden_dim = {}", spec.hidden_dim);
    println!("heads = {}", spec.num_heads);
    print_config(json!({
        "command": "train",
        "arch": a.arch.as_str(),
        "features": mode.name(),
        "seed": a.seed,
        "d_embed": a.d_embed,
        "embed_seed": a.embed_seed,
        "train": serde_json::to_value(&config)?,
        "model": model_value,
    }));
    println!(
        "samples: train {} / val {} / test {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );

    let outcome = train::train(&mut tagger, &splits.train, &splits.val, &config)?;
    println!(
        "best epoch {} with val GOAL/DETAIL macro-F1 {:.4}",
        outcome.best_epoch, outcome.best_val_f1
    );
    let history = a
        .history
        .clone()
        .unwrap_or_else(|| a.out.with_extension("history.csv"));
    train::write_history_csv(&outcome.history, &history)?;
    println!("history written to {}", history.display());

    let meta = CheckpointMeta {
        feature_mode: mode,
        d_embed: a.d_embed,
        embed_seed: a.embed_seed,
        normalizer,
        seed: a.seed,
    };
    save_checkpoint(&tagger, &meta, &a.out)?;
    println!("checkpoint written to {}", a.out.display());

    let report = train::evaluate(&tagger, &splits.test)?;
    println!("test metrics:");
    print_report(&report);
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!(
        "{:<9}{:>9}{:>9}{:>9}{:>9}{:>9}",
        "class", "acc", "prec", "rec", "f1", "support"
    );
    for (label, name) in [(Label::O, "O"), (Label::GOAL, "GOAL"), (Label::DETAIL, "DETAIL")] {
        let m = r.per_class[label.index()];
        println!(
            "{:<9}{:>9.4}{:>9.4}{:>9.4}{:>9.4}{:>9}",
            name, m.accuracy, m.precision, m.recall, m.f1, m.support
        );
    }
    println!(
        "token accuracy {:.4}, macro-F1 {:.4}, GOAL/DETAIL macro-F1 {:.4}",
        r.token_accuracy, r.macro_f1, r.macro_f1_goal_detail
    );
    println!("confusion (rows gold O/GOAL/DETAIL, cols predicted):");
    for row in &r.confusion {
        println!("  {:>6} {:>6} {:>6}", row[0], row[1], row[2]);
    }
}

fn select_samples(
    samples: Vec<UtteranceSample>,
    split: SplitArg,
    seed: u64,
) -> Result<Vec<UtteranceSample>, AppError> {
    if matches!(split, SplitArg::All) {
        return Ok(samples);
    }
    let (tr, va, te) = split_by_instruction(&samples, &default_split(seed)?)?;
    Ok(match split {
        SplitArg::Train => tr,
        SplitArg::Val => va,
        SplitArg::Test => te,
        SplitArg::All => unreachable!(),
    })
}

fn cmd_eval(a: EvalArgs) -> Result<(), AppError> {
    print_config(json!({
        "command": "eval",
        "checkpoint": a.checkpoint,
        "data": a.data,
        "split": a.split.as_str(),
        "seed": a.seed,
    }));
    let (tagger, meta) = load_checkpoint(&a.checkpoint)?;
    let samples = select_samples(corpus::deserialize(&a.data)?, a.split, a.seed)?;
    let source = EmbeddingSource::pseudo(meta.d_embed, meta.embed_seed);
    let data = train::prepare(&samples, meta.feature_mode, &source, Some(&meta.normalizer))?;
    let report = train::evaluate(&tagger, &data)?;
    println!(
        "{} on {} {} samples ({} features):",
        tagger.arch(),
        a.split.as_str(),
        data.len(),
        meta.feature_mode.name()
    );
    print_report(&report);
    if let Some(out) = &a.out {
        let model = a.model_name.clone().unwrap_or_else(|| tagger.arch().to_string());
        write_eval_csv(out, &model, meta.feature_mode.name(), &report)?;
        println!("metrics written to {}", out.display());
    }
    Ok(())
}

/// One row per class plus the overall row; raw fractions, six decimals.
fn write_eval_csv(
    path: &Path,
    model: &str,
    mode: &str,
    r: &MetricsReport,
) -> Result<(), AppError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::Runtime(e.to_string()))?;
    let io = |e: csv::Error| AppError::Runtime(e.to_string());
    w.write_record(["model", "mode", "class", "acc", "prec", "rec", "f1"]).map_err(io)?;
    let mut row = |class: &str, v: [f64; 4]| {
        w.write_record([
            model.to_string(),
            mode.to_string(),
            class.to_string(),
            format!("{:.6}", v[0]),
            format!("{:.6}", v[1]),
            format!("{:.6}", v[2]),
            format!("{:.6}", v[3]),
        ])
        .map_err(io)
    };
    let m = r.per_class[Label::O.index()];
    row("O", [m.accuracy, m.precision, m.recall, m.f1])?;
    let m = r.per_class[Label::GOAL.index()];
    row("Goal", [m.accuracy, m.precision, m.recall, m.f1])?;
    let m = r.per_class[Label::DETAIL.index()];
    row("Detail", [m.accuracy, m.precision, m.recall, m.f1])?;
    row("Overall", [r.token_accuracy, r.macro_precision, r.macro_recall, r.macro_f1])?;
    w.flush().map_err(|e| AppError::Runtime(e.to_string()))
}

fn blank_report() -> MetricsReport {
    MetricsReport {
        per_class: [ClassMetrics::default(); 3],
        token_accuracy: 0.0,
        macro_precision: 0.0,
        macro_recall: 0.0,
        macro_f1: 0.0,
        macro_f1_goal_detail: 0.0,
        confusion: [[0; 3]; 3],
    }
}

fn cmd_report(a: ReportArgs) -> Result<(), AppError> {
    print_config(json!({
        "command": "report",
        "inputs": a.inputs,
        "out": a.out,
    }));
    let mut entries: Vec<ReportEntry> = Vec::new();
    for path in &a.inputs {
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| AppError::Runtime(e.to_string()))?;
        for record in reader.records() {
            let record = record.map_err(|e| AppError::Runtime(e.to_string()))?;
            if record.len() != 7 {
                return Err(AppError::Runtime(format!(
                    "{}: expected 7 columns, found {}",
                    path.display(),
                    record.len()
                )));
            }
            let field = |i: usize| -> Result<f64, AppError> {
                record[i].parse().map_err(|_| {
                    AppError::Runtime(format!("{}: bad number '{}'", path.display(), &record[i]))
                })
            };
            let (model, mode, class) = (&record[0], &record[1], &record[2]);
            let values = [field(3)?, field(4)?, field(5)?, field(6)?];
            let entry = match entries.iter_mut().find(|e| e.model == model && e.mode == mode) {
                Some(e) => e,
                None => {
                    entries.push(ReportEntry {
                        model: model.to_string(),
                        mode: mode.to_string(),
                        report: blank_report(),
                    });
                    entries.last_mut().expect("just pushed")
                }
            };
            let r = &mut entry.report;
            let set_class = |m: &mut ClassMetrics, v: [f64; 4]| {
                m.accuracy = v[0];
                m.precision = v[1];
                m.recall = v[2];
                m.f1 = v[3];
            };
            match class {
                "O" => set_class(&mut r.per_class[Label::O.index()], values),
                "Goal" => set_class(&mut r.per_class[Label::GOAL.index()], values),
                "Detail" => set_class(&mut r.per_class[Label::DETAIL.index()], values),
                "Overall" => {
                    r.token_accuracy = values[0];
                    r.macro_precision = values[1];
                    r.macro_recall = values[2];
                    r.macro_f1 = values[3];
                }
                other => {
                    return Err(AppError::Runtime(format!(
                        "{}: unknown class '{other}'",
                        path.display()
                    )))
                }
            }
        }
    }
    let (text, csv_out) = train::report_table(&entries)?;
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, csv_out)?;
        println!("table written to {}", out.display());
    }
    Ok(())
}

fn default_trial_point(arch: ArchArg) -> TrialPoint {
    match arch {
        ArchArg::Bilstm => TrialPoint {
            lr: 4.2e-3,
            weight_decay: 5.44e-5,
            hidden_dim: 512,
            num_layers: 1,
            num_heads: 4,
            attn_layers: 1,
            dropout: 0.45,
        },
        ArchArg::Transformer => TrialPoint {
            lr: 2.22e-4,
            weight_decay: 2.25e-6,
            hidden_dim: 448,
            num_layers: 3,
            num_heads: 8,
            attn_layers: 1,
            dropout: 0.25,
        },
    }
}

fn cmd_search(a: SearchArgs) -> Result<(), AppError> {
    print_config(json!({
        "command": "search",
        "arch": a.arch.as_str(),
        "features": a.features.name(),
        "budget": a.budget,
        "seed": a.seed,
        "max_epochs": a.max_epochs,
    }));
    let source = EmbeddingSource::pseudo(a.d_embed, a.embed_seed);
    let (splits, _) = load_splits(&a.data, a.seed, a.features, &source)?;
    let base = TrainConfig {
        max_epochs: a.max_epochs,
        ..match a.arch {
            ArchArg::Bilstm => TrainConfig::bilstm_default(a.seed),
            ArchArg::Transformer => TrainConfig::transformer_default(a.seed),
        }
    };
    let explicit = if a.skip_defaults {
        vec![]
    } else {
        vec![default_trial_point(a.arch)]
    };
    let space = SearchSpace::standard(a.budget);
    let (best, trials) = train::hyperparameter_search(
        a.arch.as_str(),
        &space,
        &explicit,
        &splits.train,
        &splits.val,
        &base,
    )?;
    train::write_trials_csv(&trials, &a.out)?;
    println!("{} trials written to {}", trials.len(), a.out.display());
    println!(
        "best point: lr {:e}, weight_decay {:e}, hidden {}, layers {}, heads {}, attn {}, dropout {:.3}",
        best.lr, best.weight_decay, best.hidden_dim, best.num_layers, best.num_heads,
        best.attn_layers, best.dropout
    );
    Ok(())
}

/// One gold-tagged example per distinct training instruction, up to `n`.
fn pick_examples(
    train_samples: &[UtteranceSample],
    n: usize,
) -> Result<Vec<DisambiguationQuery>, AppError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in train_samples {
        if out.len() == n {
            break;
        }
        if seen.insert(s.instruction_id) {
            out.push(llm::query_from_sample(s, s.labels.clone())?);
        }
    }
    if out.len() < n {
        return Err(AppError::Runtime(format!(
            "training split has only {} distinct instructions, need {n} examples",
            out.len()
        )));
    }
    Ok(out)
}

fn cmd_disambiguate(a: DisambiguateArgs) -> Result<(), AppError> {
    print_config(json!({
        "command": "disambiguate",
        "data": a.data,
        "tagger": a.tagger.as_str(),
        "transport": matches!(a.transport, TransportArg::Http).then_some("http").unwrap_or("mock"),
        "split": a.split.as_str(),
        "examples": a.examples,
        "seed": a.seed,
    }));
    let samples = corpus::deserialize(&a.data)?;
    let (tr, _, _) = split_by_instruction(&samples, &default_split(a.seed)?)?;
    let examples = pick_examples(&tr, a.examples)?;
    let query_samples = select_samples(samples, a.split, a.seed)?;

    let checkpoint_tagger = match a.tagger {
        TaggerArg::Checkpoint => {
            let path = a.checkpoint.clone().ok_or_else(|| {
                AppError::Usage("--tagger checkpoint requires --checkpoint".into())
            })?;
            Some(load_checkpoint(&path)?)
        }
        _ => None,
    };

    let mut queries = Vec::with_capacity(query_samples.len());
    for s in &query_samples {
        let tags = match (&a.tagger, &checkpoint_tagger) {
            (TaggerArg::Gold, _) => s.labels.clone(),
            (TaggerArg::None, _) => vec![Label::O; s.labels.len()],
            (TaggerArg::Checkpoint, Some((tagger, meta))) => {
                let source = EmbeddingSource::pseudo(meta.d_embed, meta.embed_seed);
                let rows =
                    corpus::featurize(s, meta.feature_mode, &source, Some(&meta.normalizer))?;
                let x = prosotag::autodiff::Tensor::from_rows(&rows)
                    .map_err(|e| AppError::Runtime(e.to_string()))?;
                tagger.predict(&x, &vec![true; rows.len()])?
            }
            (TaggerArg::Checkpoint, None) => unreachable!(),
        };
        queries.push(llm::query_from_sample(s, tags)?);
    }

    let transport = match a.transport {
        TransportArg::Mock => Transport::Mock,
        TransportArg::Http => {
            let mut config = HttpConfig::new(&a.endpoint, &a.model);
            config.api_key_env = a.api_key_env.clone();
            config.max_retries = a.max_retries;
            config.timeout_s = a.timeout_s;
            config.max_concurrent = a.max_concurrent;
            Transport::Http(config)
        }
    };
    let result = llm::eval_plan_selection(&queries, &examples, &transport, a.tagger.as_str())?;
    println!(
        "plan-selection accuracy {:.4} over {} queries (tagger {})",
        result.accuracy,
        result.rows.len(),
        a.tagger.as_str()
    );
    for (name, value) in PAPER_REFERENCE {
        println!("reference {name}: {value:.4}");
    }
    if let Some(out) = &a.out {
        llm::write_plan_csv(&result, out)?;
        println!("per-query results written to {}", out.display());
    }
    Ok(())
}
