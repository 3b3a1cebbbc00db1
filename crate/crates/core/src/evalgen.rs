//! Greedy decoding for the causal model, pathology parsing and evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PathologyClass, PromptExample};
use crate::tokenizer::{TokenSeq, TokenizerError, Vocab, EOS, PAD};
use crate::trainer::{metrics, Metrics, TrainError, N_CLASSES};
use crate::transformer::{decoder_forward_batch, Arch, Batch, ModelError, ModelParams};

pub const DEFAULT_MAX_NEW: usize = 8;
pub const DEFAULT_SAMPLES: usize = 3;

/// Sample order: High, Low, Severe, then Moderate.
const SAMPLE_ORDER: [PathologyClass; 4] = [
    PathologyClass::HighNoise,
    PathologyClass::LowNoise,
    PathologyClass::SevereNoise,
    PathologyClass::ModerateNoise,
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prompt needs {needed} tokens but only {budget} fit before the generation budget")]
    PromptTooLong { needed: usize, budget: usize },
    #[error("empty test split")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub ids: Vec<u32>,
    pub hit_eos: bool,
}

/// Appends the argmax token until EOS or `max_new` tokens. PAD is never
/// chosen; among equal logits the lowest id wins. The prompt is shortened
/// inside its I/Q segment when it does not fit in `max_len - max_new`.
pub fn greedy_generate(
    model: &ModelParams,
    vocab: &Vocab,
    prompt: &str,
    max_new: usize,
) -> Result<Generation, EvalError> {
    model.check_arch(Arch::Decoder)?;
    let budget = model.config.max_len.saturating_sub(max_new);
    let raw = vocab.ids(prompt);
    let needed = raw.len();
    let mut ids = vocab.fit(raw, budget).map_err(|e| match e {
        TokenizerError::PromptTooLong { .. } => EvalError::PromptTooLong { needed, budget },
        other => other.into(),
    })?;
    if ids.is_empty() {
        return Err(EvalError::PromptTooLong { needed: 0, budget });
    }
    let start = ids.len();
    let v = model.config.vocab_size;
    let mut hit_eos = false;
    for _ in 0..max_new {
        let seq = TokenSeq {
            attention_mask: vec![1; ids.len()],
            length: ids.len(),
            ids: ids.clone(),
        };
        let batch = Batch::from_seqs(&[&seq], &model.config)?;
        let logits = decoder_forward_batch(model, &batch)?;
        let last = &logits.values()[(ids.len() - 1) * v..ids.len() * v];
        let mut best = None::<(usize, f64)>;
        for (id, &x) in last.iter().enumerate() {
            if id as u32 == PAD {
                continue;
            }
            if best.is_none_or(|(_, b)| x > b) {
                best = Some((id, x));
            }
        }
        let next = best.map_or(EOS, |(id, _)| id as u32);
        if next == EOS {
            hit_eos = true;
            break;
        }
        ids.push(next);
    }
    let generated = ids[start..].to_vec();
    Ok(Generation {
        text: vocab.decode(&generated)?,
        ids: generated,
        hit_eos,
    })
}

/// Earliest case-sensitive occurrence of a class name.
pub fn parse_pathology(text: &str) -> Option<PathologyClass> {
    PathologyClass::ALL
        .into_iter()
        .filter_map(|c| text.find(c.name()).map(|pos| (pos, c)))
        .min_by_key(|&(pos, c)| (pos, c.label()))
        .map(|(_, c)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub prompt: String,
    pub generated: String,
    /// `None` when no class name was found.
    #[serde(with = "parsed_name")]
    pub parsed: Option<PathologyClass>,
    pub gold: PathologyClass,
}

mod parsed_name {
    use super::PathologyClass;
    use serde::{Deserialize, Deserializer, Serializer};

    pub const UNPARSEABLE: &str = "unparseable";

    pub fn serialize<S: Serializer>(v: &Option<PathologyClass>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(v.map_or(UNPARSEABLE, PathologyClass::name))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<PathologyClass>, D::Error> {
        let name = String::deserialize(d)?;
        if name == UNPARSEABLE {
            return Ok(None);
        }
        PathologyClass::from_name(&name)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown class {name:?}")))
    }
}

impl Completion {
    /// Prompt followed by the completion, as the model sees it.
    pub fn render(&self) -> String {
        format!("{} {}", self.prompt, self.generated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRate {
    pub class: PathologyClass,
    pub total: usize,
    pub correct: usize,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEval {
    pub n: usize,
    pub exact_match_rate: f64,
    pub unparseable_rate: f64,
    pub per_class: Vec<ClassRate>,
    /// Metrics over parseable completions only; `None` if there are none.
    pub parsed_metrics: Option<Metrics>,
    pub samples: Vec<Completion>,
}

impl CausalEval {
    /// Sample completions, one block per example.
    pub fn render_samples(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "--- sample {} (gold: {}) ---", i + 1, c.gold.name());
            let _ = writeln!(out, "{}", c.render());
        }
        out
    }
}

/// Scores completions produced by `complete` against the gold labels.
/// Unparseable completions count as misses and are reported separately.
pub fn eval_completions<F>(examples: &[&PromptExample], n_samples: usize, mut complete: F) -> Result<CausalEval, EvalError>
where
    F: FnMut(&PromptExample) -> Result<String, EvalError>,
{
    if examples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut completions = Vec::with_capacity(examples.len());
    for ex in examples {
        let generated = complete(ex)?;
        completions.push(Completion {
            prompt: ex.prompt.clone(),
            parsed: parse_pathology(&generated),
            generated,
            gold: ex.label,
        });
    }
    let n = completions.len();
    let correct = completions.iter().filter(|c| c.parsed == Some(c.gold)).count();
    let unparseable = completions.iter().filter(|c| c.parsed.is_none()).count();
    let per_class = PathologyClass::ALL
        .into_iter()
        .map(|class| {
            let total = completions.iter().filter(|c| c.gold == class).count();
            let correct = completions
                .iter()
                .filter(|c| c.gold == class && c.parsed == Some(class))
                .count();
            ClassRate {
                class,
                total,
                correct,
                rate: (total > 0).then(|| correct as f64 / total as f64),
            }
        })
        .collect();
    let (pred, gold): (Vec<usize>, Vec<usize>) = completions
        .iter()
        .filter_map(|c| c.parsed.map(|p| (p.label() as usize, c.gold.label() as usize)))
        .unzip();
    let parsed_metrics = if pred.is_empty() { None } else { Some(metrics(&pred, &gold)?) };
    let mut samples = Vec::new();
    for class in SAMPLE_ORDER.into_iter().take(n_samples.min(N_CLASSES)) {
        if let Some(c) = completions.iter().find(|c| c.gold == class) {
            samples.push(c.clone());
        }
    }
    Ok(CausalEval {
        n,
        exact_match_rate: correct as f64 / n as f64,
        unparseable_rate: unparseable as f64 / n as f64,
        per_class,
        parsed_metrics,
        samples,
    })
}

/// Greedy-decodes every example and scores it.
pub fn eval_causal(
    model: &ModelParams,
    vocab: &Vocab,
    examples: &[&PromptExample],
    max_new: usize,
    n_samples: usize,
) -> Result<CausalEval, EvalError> {
    eval_completions(examples, n_samples, |ex| {
        Ok(greedy_generate(model, vocab, &ex.prompt, max_new)?.text)
    })
}
