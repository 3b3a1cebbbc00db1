//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 divergence, 5 incompatible
//! artifacts (vocabulary hash or model config mismatch).

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use config::{ModelSection, RunConfig};

use crate::dataset::{
    build_dataset, class_counts, load_examples, render_prompt, save_examples, save_manifest, split_of,
    write_atomic, DatasetError, PathologyClass, PromptExample, Split,
};
use crate::evalgen::{eval_causal, greedy_generate, EvalError, DEFAULT_MAX_NEW, DEFAULT_SAMPLES};
use crate::lora::{inject, report as lora_report, LoraError, LoraReport};
use crate::sigsynth::{synth_frame, ModulationKind, SynthError, FRAME_LEN};
use crate::tokenizer::{EncodeMode, TokenizerError, Vocab};
use crate::trainer::{
    argmax, encode_causal, encode_classifier, evaluate_classifier, metrics, train_causal, train_classifier,
    Metrics, TrainError, TrainReport,
};
use crate::transformer::{
    encoder_forward, load_adapters, load_model, save_adapters, save_model, Arch, ModelError, ModelParams,
    ModelSidecar,
};

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MODEL_FILE: &str = "model.bin";
pub const ADAPTER_FILE: &str = "adapter.bin";
pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Io { .. } => 3,
            Self::Divergence(_) => 4,
            Self::Incompatible(_) => 5,
            Self::Failed(_) => 1,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { path, source } => Self::Io { path, source },
            DatasetError::Synth(_)
            | DatasetError::Malformed { .. }
            | DatasetError::LabelMismatch { .. }
            | DatasetError::Manifest(_) => Self::Failed(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Io { path, source } => Self::Io { path, source },
            TokenizerError::MaxLenTooSmall(_) => Self::Usage(e.to_string()),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { path, source } => Self::Io { path, source },
            ModelError::Config(_) => Self::Usage(e.to_string()),
            ModelError::WrongArch { .. } => Self::Incompatible(e.to_string()),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence(_) => Self::Divergence(e.to_string()),
            TrainError::Config(_) | TrainError::UnknownPreset(_) | TrainError::EmptySplit(_) => {
                Self::Usage(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Tokenizer(t) => t.into(),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Tokenizer(t) => t.into(),
            EvalError::Train(t) => t.into(),
            EvalError::EmptySplit => Self::Usage(e.to_string()),
            other => Self::Failed(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "wifidiag", version, about = "Noise-driven WiFi pathology detection with small transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize frames, render prompts and write examples, manifest and vocabulary.
    GenData(GenDataArgs),
    /// Train the encoder classifier.
    TrainCls(TrainArgs),
    /// Train the causal decoder.
    TrainLm(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Classify or complete a single prompt.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON file with flat dotted keys, applied over defaults and preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` override; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated modulation names, e.g. `BPSK,QPSK`.
    #[arg(long)]
    pub mods: Option<String>,
    /// Lowest SNR level in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr_min: Option<f64>,
    /// Highest SNR level in dB, inclusive.
    #[arg(long, allow_hyphen_values = true)]
    pub snr_max: Option<f64>,
    /// Spacing of the SNR grid in dB.
    #[arg(long)]
    pub snr_step: Option<f64>,
    /// Frames per (modulation, SNR) cell.
    #[arg(long)]
    pub frames_per_pair: Option<usize>,
    /// I/Q pairs quoted in each prompt.
    #[arg(long)]
    pub preview_len: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `finetune-encoder` or `finetune-decoder`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Train low-rank adapters on a frozen base.
    #[arg(long)]
    pub lora: bool,
    /// Base checkpoint to adapt or continue from; fresh weights otherwise.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of passes over the training split.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Examples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Clip the global gradient norm at this value.
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint (`model.bin`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapter file to attach to the checkpoint.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Split to score: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model checkpoint (`model.bin`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Adapter file to attach to the checkpoint.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Vocabulary file; defaults to `vocab.json` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// SNR in dB of a synthesized frame to render into a prompt.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
    pub snr: Option<f64>,
    /// Modulation of the synthesized frame.
    #[arg(long = "mod", default_value = "QPSK")]
    pub modulation: ModulationKind,
    /// Seed of the synthesized frame.
    #[arg(long, default_value_t = 0)]
    pub frame_seed: u64,
    /// I/Q pairs quoted in the prompt.
    #[arg(long, default_value_t = crate::dataset::DEFAULT_PREVIEW_LEN)]
    pub preview_len: usize,
    /// Read the prompt text from this file instead.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let text = match cli.command {
        Command::GenData(args) => gen_data(&args)?,
        Command::TrainCls(args) => train(&args, Arch::Encoder)?,
        Command::TrainLm(args) => train(&args, Arch::Decoder)?,
        Command::Eval(args) => eval(&args)?,
        Command::Predict(args) => predict(&args)?,
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn resolve(arch: Arch, preset: Option<&str>, common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::defaults(arch);
    if let Some(p) = preset {
        cfg.apply_preset(p)?;
    }
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &CommonArgs) -> Result<(), CliError> {
    for o in &common.overrides {
        cfg.set(o)?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut json = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    json.push('\n');
    write_file(path, json.as_bytes())
}

fn gen_data(args: &GenDataArgs) -> Result<String, CliError> {
    let mut cfg = resolve(Arch::Encoder, None, &args.common)?;
    if let Some(mods) = &args.mods {
        cfg.data.modulations = mods
            .split(',')
            .filter(|m| !m.trim().is_empty())
            .map(|m| m.trim().parse().map_err(|e: SynthError| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    let d = &mut cfg.data;
    d.snr_min = args.snr_min.unwrap_or(d.snr_min);
    d.snr_max = args.snr_max.unwrap_or(d.snr_max);
    d.snr_step = args.snr_step.unwrap_or(d.snr_step);
    d.frames_per_pair = args.frames_per_pair.unwrap_or(d.frames_per_pair);
    d.preview_len = args.preview_len.unwrap_or(d.preview_len);
    apply_overrides(&mut cfg, &args.common)?;
    let d = &cfg.data;
    if !(d.snr_step > 0.0 && d.snr_step.is_finite() && d.snr_min.is_finite() && d.snr_max >= d.snr_min) {
        return Err(CliError::Usage(format!(
            "invalid SNR grid: min {} max {} step {}",
            d.snr_min, d.snr_max, d.snr_step
        )));
    }

    let (examples, manifest) = build_dataset(&cfg.dataset_config())?;
    let prompts: Vec<&str> = examples.iter().map(|e| e.prompt.as_str()).collect();
    let vocab = Vocab::for_prompts(&prompts)?;

    create_dir(&args.out)?;
    save_examples(&examples, &args.out.join(EXAMPLES_FILE))?;
    save_manifest(&manifest, &args.out.join(MANIFEST_FILE))?;
    vocab.save(&args.out.join(VOCAB_FILE))?;
    write_file(&args.out.join(RESOLVED_CONFIG_FILE), cfg.to_json().as_bytes())?;

    let mut text = format!(
        "wrote {} examples ({} modulations x {} SNR levels x {} frames) to {}\n",
        examples.len(),
        manifest.modulations.len(),
        manifest.snr_levels.len(),
        manifest.frames_per_pair,
        args.out.display()
    );
    text.push_str(&render_histogram(&examples));
    Ok(text)
}

fn render_histogram(examples: &[PromptExample]) -> String {
    let counts = class_counts(examples);
    let mut text = format!("{:<8}", "split");
    for class in PathologyClass::ALL {
        let _ = write!(text, "{:>16}", class.name());
    }
    text.push('\n');
    for (split, row) in &counts {
        let _ = write!(text, "{:<8}", split.as_str());
        for n in row {
            let _ = write!(text, "{n:>16}");
        }
        text.push('\n');
    }
    text
}

fn load_vocab(path: &Path) -> Result<Vocab, CliError> {
    Ok(Vocab::load(path)?)
}

fn check_vocab(sidecar: &ModelSidecar, vocab: &Vocab, vocab_path: &Path) -> Result<(), CliError> {
    let hash = vocab.hash();
    if sidecar.vocab_hash != hash {
        return Err(CliError::Incompatible(format!(
            "vocabulary hash mismatch: checkpoint was trained with {} but {} hashes to {hash}; \
             use the vocabulary the checkpoint was trained with",
            sidecar.vocab_hash,
            vocab_path.display()
        )));
    }
    Ok(())
}

/// Loads a model and optional adapters, checking both against `vocab`.
fn load_checkpoint(
    checkpoint: &Path,
    adapter: Option<&Path>,
    vocab: &Vocab,
    vocab_path: &Path,
) -> Result<ModelParams, CliError> {
    let (model, sidecar) = load_model(checkpoint)?;
    check_vocab(&sidecar, vocab, vocab_path)?;
    match adapter {
        None => Ok(model),
        Some(path) => {
            let (adapted, side) = load_adapters(&model, path).map_err(|e| match e {
                ModelError::Checkpoint(m) => CliError::Incompatible(m),
                other => other.into(),
            })?;
            check_vocab(&side, vocab, vocab_path)?;
            Ok(adapted)
        }
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    #[serde(flatten)]
    report: &'a TrainReport,
    vocab_hash: String,
}

fn train(args: &TrainArgs, arch: Arch) -> Result<String, CliError> {
    let mut cfg = resolve(arch, args.preset.as_deref(), &args.common)?;
    let t = &mut cfg.train;
    t.learning_rate = args.lr.unwrap_or(t.learning_rate);
    t.epochs = args.epochs.unwrap_or(t.epochs);
    t.batch_size = args.batch_size.unwrap_or(t.batch_size);
    if args.grad_clip.is_some() {
        t.grad_clip = args.grad_clip;
    }
    if args.lora {
        cfg.lora.enabled = true;
    }
    apply_overrides(&mut cfg, &args.common)?;
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;

    let vocab_path = args.data.join(VOCAB_FILE);
    let vocab = load_vocab(&vocab_path)?;
    let examples = load_examples(&args.data.join(EXAMPLES_FILE))?;

    // a base checkpoint fixes the architecture; the resolved config records it
    let base = match &args.base {
        Some(path) => {
            let (model, sidecar) = load_model(path)?;
            check_vocab(&sidecar, &vocab, &vocab_path)?;
            model.check_arch(arch)?;
            cfg.model = ModelSection::of(&model.config);
            model
        }
        None => ModelParams::init(cfg.model_config(arch, vocab.len()), cfg.seed)?,
    };
    let model_cfg = base.config.clone();
    let mut model = match cfg.lora_config() {
        Some(lora) => inject(&base, &lora, cfg.seed)?,
        None => base,
    };

    let train_split = split_of(&examples, Split::Train);
    let val_split = split_of(&examples, Split::Val);
    let mut progress = |m: &crate::trainer::EpochMetrics| {
        eprintln!(
            "epoch {} train_loss {:.6} val_loss {:.6}",
            m.epoch, m.train_loss, m.val_loss
        );
    };
    let outcome = match arch {
        Arch::Encoder => {
            let tr = encode_classifier(&vocab, &train_split, model_cfg.max_len)?;
            let va = encode_classifier(&vocab, &val_split, model_cfg.max_len)?;
            train_classifier(&mut model, &tr, &va, &train_cfg, &mut progress)?
        }
        Arch::Decoder => {
            let tr = encode_causal(&vocab, &train_split, model_cfg.max_len)?;
            let va = encode_causal(&vocab, &val_split, model_cfg.max_len)?;
            train_causal(&mut model, &tr, &va, &train_cfg, &mut progress)?
        }
    };

    create_dir(&args.out)?;
    let hash = vocab.hash();
    save_model(&outcome.best, &hash, &args.out.join(MODEL_FILE))?;
    if outcome.best.has_adapters() {
        save_adapters(&outcome.best, &hash, &args.out.join(ADAPTER_FILE))?;
    }
    vocab.save(&args.out.join(VOCAB_FILE))?;
    write_json(
        &args.out.join(REPORT_FILE),
        &TrainSummary {
            report: &outcome.report,
            vocab_hash: hash,
        },
    )?;
    write_file(&args.out.join(RESOLVED_CONFIG_FILE), cfg.to_json().as_bytes())?;

    let mut text = outcome.report.render_table();
    if let Some(lora) = &outcome.report.lora {
        let _ = writeln!(text, "{lora}");
    }
    Ok(text)
}

#[derive(Debug, Serialize)]
struct ClassifierEval {
    split: Split,
    n: usize,
    loss: f64,
    metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    lora: Option<LoraReport>,
}

fn render_metrics(m: &Metrics) -> String {
    let mut text = format!(
        "accuracy {:.4}  macro-F1 {:.4}  weighted-F1 {:.4}\n",
        m.accuracy, m.f1_macro, m.f1_weighted
    );
    let _ = writeln!(text, "{:<16}{:>8}  confusion (rows gold, columns predicted)", "class", "F1");
    for class in PathologyClass::ALL {
        let i = class.label() as usize;
        let f1 = m.per_class_f1[i].map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
        let row: Vec<String> = m.confusion[i].iter().map(|n| format!("{n:>5}")).collect();
        let _ = writeln!(text, "{:<16}{f1:>8}  {}", class.name(), row.join(""));
    }
    text
}

fn eval(args: &EvalArgs) -> Result<String, CliError> {
    let vocab_path = args.data.join(VOCAB_FILE);
    let vocab = load_vocab(&vocab_path)?;
    let model = load_checkpoint(&args.checkpoint, args.adapter.as_deref(), &vocab, &vocab_path)?;
    let examples = load_examples(&args.data.join(EXAMPLES_FILE))?;
    let split = split_of(&examples, args.split);
    if split.is_empty() {
        return Err(CliError::Usage(format!("split {} is empty", args.split)));
    }
    let (json, table) = match model.config.arch {
        Arch::Encoder => {
            let data = encode_classifier(&vocab, &split, model.config.max_len)?;
            let (loss, preds) = evaluate_classifier(&model, &data)?;
            let m = metrics(&preds, &data.labels)?;
            let table = render_metrics(&m);
            let report = ClassifierEval {
                split: args.split,
                n: split.len(),
                loss,
                metrics: m,
                lora: model.has_adapters().then(|| lora_report(&model)),
            };
            (serde_json::to_string_pretty(&report), table)
        }
        Arch::Decoder => {
            let report = eval_causal(&model, &vocab, &split, DEFAULT_MAX_NEW, DEFAULT_SAMPLES)?;
            let mut table = format!(
                "exact match {:.4}  unparseable {:.4}\n",
                report.exact_match_rate, report.unparseable_rate
            );
            table.push_str(&report.render_samples());
            (serde_json::to_string_pretty(&report), table)
        }
    };
    let mut json = json.map_err(|e| CliError::Failed(e.to_string()))?;
    json.push('\n');
    if let Some(path) = &args.out {
        write_file(path, json.as_bytes())?;
    }
    Ok(table)
}

fn predict(args: &PredictArgs) -> Result<String, CliError> {
    let vocab_path = match &args.vocab {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(VOCAB_FILE),
    };
    let vocab = load_vocab(&vocab_path)?;
    let model = load_checkpoint(&args.checkpoint, args.adapter.as_deref(), &vocab, &vocab_path)?;
    let prompt = match (&args.prompt_file, args.snr) {
        (Some(path), _) => std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?,
        (None, Some(snr)) => {
            let frame = synth_frame(args.modulation, snr, FRAME_LEN, args.frame_seed)?;
            render_prompt(&frame, args.preview_len, crate::dataset::DEFAULT_DECIMALS)?
        }
        (None, None) => return Err(CliError::Usage("either --snr or --prompt-file is required".into())),
    };
    match model.config.arch {
        Arch::Encoder => {
            let seq = vocab.encode(&prompt, EncodeMode::Classifier, model.config.max_len)?;
            let logits = encoder_forward(&model, &[&seq])?;
            let class = PathologyClass::ALL[argmax(logits.values())];
            Ok(format!("{}\n", class.name()))
        }
        Arch::Decoder => {
            let generation = greedy_generate(&model, &vocab, prompt.trim_end(), DEFAULT_MAX_NEW)?;
            Ok(format!("{}\n", generation.text))
        }
    }
}
