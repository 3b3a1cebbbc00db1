//! AdamW training loops for both model families, classification metrics and
//! per-epoch reports.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PathologyClass, PromptExample};
use crate::lora::LoraReport;
use crate::seed::rng_for;
use crate::tensor::{Graph, Tensor, TensorError};
use crate::tokenizer::{EncodeMode, TokenSeq, TokenizerError, Vocab};
use crate::transformer::{
    decoder_logits, encoder_logits, next_token_targets, Arch, Batch, ModelError, ModelParams, Subset,
};

pub const N_CLASSES: usize = 4;
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("divergence detected in {0}")]
    Divergence(String),
    #[error("length mismatch: {predictions} predictions vs {gold} gold labels")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("label {0} outside 0..4")]
    BadLabel(usize),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("unknown preset {0:?} (expected finetune-encoder or finetune-decoder)")]
    UnknownPreset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Causal loss over completion tokens only.
    pub completion_only: bool,
}

impl TrainConfig {
    /// Desk-scale defaults for a from-scratch model of `arch`. A model
    /// trained from scratch must learn to locate the SNR digits itself, which
    /// needs a larger step than fine-tuning; beta2 0.98 and a unit norm cap
    /// keep that step stable.
    pub fn desk(arch: Arch) -> Self {
        let (batch_size, epochs) = match arch {
            Arch::Encoder => (16, 10),
            Arch::Decoder => (4, 2),
        };
        Self {
            learning_rate: 2e-3,
            batch_size,
            epochs,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            seed: 1,
            shuffle: true,
            grad_clip: Some(1.0),
            completion_only: false,
        }
    }

    /// Fine-tuning hyperparameters of the original pretrained setting.
    pub fn preset(name: &str) -> Result<Self, TrainError> {
        match name {
            "finetune-encoder" => Ok(Self {
                learning_rate: 2e-5,
                batch_size: 32,
                epochs: 3,
                beta2: 0.999,
                grad_clip: None,
                ..Self::desk(Arch::Encoder)
            }),
            "finetune-decoder" => Ok(Self {
                learning_rate: 5e-5,
                batch_size: 4,
                epochs: 2,
                beta2: 0.999,
                grad_clip: None,
                ..Self::desk(Arch::Decoder)
            }),
            other => Err(TrainError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// AdamW moments for every tensor in canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// One AdamW update with decoupled decay:
/// `w <- w (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
///
/// `grads` follow [`crate::transformer::Weights::visit`] order. Frozen
/// tensors are left untouched. Nothing is written when any trainable
/// gradient is non-finite.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let mut shapes = Vec::new();
    let mut bad = None;
    params.weights.visit(Subset::All, |name, p| {
        let i = shapes.len();
        shapes.push(p.value.numel());
        if bad.is_none() && p.trainable {
            if let Some(g) = grads.get(i) {
                if g.values().iter().any(|x| !x.is_finite()) {
                    bad = Some(name.to_string());
                }
            }
        }
    });
    if let Some(name) = bad {
        return Err(TrainError::Divergence(name));
    }
    if grads.len() != shapes.len() || grads.iter().zip(&shapes).any(|(g, &n)| g.numel() != n) {
        return Err(TrainError::Config("gradient list does not match the parameters".into()));
    }
    if state.m.is_empty() {
        state.m = shapes.iter().map(|&n| vec![0.0; n]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;
    let mut i = 0;
    params.weights.visit_mut(Subset::All, |_, p| {
        let k = i;
        i += 1;
        if !p.trainable {
            return;
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (j, (w, &g)) in p.value.values_mut().iter_mut().zip(grads[k].values()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    });
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.values())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.values_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub per_class_f1: [Option<f64>; N_CLASSES],
    /// `confusion[gold][predicted]`
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
}

/// Accuracy, macro and support-weighted F1, and the confusion matrix.
/// Classes absent from both lists are left out of the macro mean.
pub fn metrics(predictions: &[usize], gold: &[usize]) -> Result<Metrics, TrainError> {
    if predictions.len() != gold.len() || gold.is_empty() {
        return Err(TrainError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
    for (&p, &g) in predictions.iter().zip(gold) {
        if p >= N_CLASSES {
            return Err(TrainError::BadLabel(p));
        }
        if g >= N_CLASSES {
            return Err(TrainError::BadLabel(g));
        }
        confusion[g][p] += 1;
    }
    let n = gold.len() as f64;
    let correct: usize = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
    let mut per_class_f1 = [None; N_CLASSES];
    let mut weighted = 0.0;
    for c in 0..N_CLASSES {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..N_CLASSES).map(|g| confusion[g][c]).sum();
        if support + predicted == 0 {
            continue;
        }
        let f1 = 2.0 * tp as f64 / (support + predicted) as f64;
        per_class_f1[c] = Some(f1);
        weighted += support as f64 * f1;
    }
    let present: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    Ok(Metrics {
        accuracy: correct as f64 / n,
        f1_macro: present.iter().sum::<f64>() / present.len() as f64,
        f1_weighted: weighted / n,
        per_class_f1,
        confusion,
    })
}

/// One report row. Classifier rows carry all four values; causal rows only
/// the two losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1_macro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: Arch,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lora: Option<LoraReport>,
}

impl TrainReport {
    /// Fixed-width table under the usual column headers.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        match self.arch {
            Arch::Encoder => {
                let _ = writeln!(
                    out,
                    "{:>5}  {:>13}  {:>15}  {:>8}  {:>6}",
                    "Epoch", "Training Loss", "Validation Loss", "Accuracy", "F1"
                );
                for r in &self.epochs {
                    let _ = writeln!(
                        out,
                        "{:>5}  {:>13.6}  {:>15.6}  {:>8.4}  {:>6.4}",
                        r.epoch,
                        r.train_loss,
                        r.val_loss,
                        r.accuracy.unwrap_or(f64::NAN),
                        r.f1_macro.unwrap_or(f64::NAN)
                    );
                }
            }
            Arch::Decoder => {
                let _ = writeln!(out, "{:>5}  {:>13}  {:>15}", "Epoch", "Training Loss", "Validation Loss");
                for r in &self.epochs {
                    let _ = writeln!(out, "{:>5}  {:>13.6}  {:>15.6}", r.epoch, r.train_loss, r.val_loss);
                }
            }
        }
        out
    }
}

/// Report plus the weights of the lowest-validation-loss epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: ModelParams,
}

/// Encoded classifier inputs.
#[derive(Debug, Clone)]
pub struct ClassifierData {
    pub seqs: Vec<TokenSeq>,
    pub labels: Vec<usize>,
}

pub fn encode_classifier(
    vocab: &Vocab,
    examples: &[&PromptExample],
    max_len: usize,
) -> Result<ClassifierData, TrainError> {
    let mut seqs = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for ex in examples {
        seqs.push(vocab.encode(&ex.prompt, EncodeMode::Classifier, max_len)?);
        labels.push(ex.label.label() as usize);
    }
    Ok(ClassifierData { seqs, labels })
}

/// Encoded causal inputs: `prompt + " " + class name + EOS`.
#[derive(Debug, Clone)]
pub struct CausalData {
    pub seqs: Vec<TokenSeq>,
    /// Position of the first completion token in each row.
    pub completion_start: Vec<usize>,
}

pub fn completion_text(class: PathologyClass) -> String {
    format!(" {}", class.name())
}

pub fn encode_causal(vocab: &Vocab, examples: &[&PromptExample], max_len: usize) -> Result<CausalData, TrainError> {
    let mut seqs = Vec::with_capacity(examples.len());
    let mut completion_start = Vec::with_capacity(examples.len());
    for ex in examples {
        let completion = completion_text(ex.label);
        let seq = vocab.encode_with_completion(&ex.prompt, &completion, max_len)?;
        completion_start.push(seq.length - vocab.ids(&completion).len() - 1);
        seqs.push(seq);
    }
    Ok(CausalData { seqs, completion_start })
}

fn log_softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(move |x| x - lse)
}

/// First index of the maximum; lower indices win ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and argmax predictions over a labelled set.
pub fn evaluate_classifier(model: &ModelParams, data: &ClassifierData) -> Result<(f64, Vec<usize>), TrainError> {
    model.check_arch(Arch::Encoder)?;
    if data.seqs.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(data.seqs.len());
    for (chunk, labels) in data.seqs.chunks(EVAL_CHUNK).zip(data.labels.chunks(EVAL_CHUNK)) {
        let refs: Vec<&TokenSeq> = chunk.iter().collect();
        let logits = crate::transformer::encoder_forward(model, &refs)?;
        for (row, &y) in logits.values().chunks(N_CLASSES).zip(labels) {
            loss -= log_softmax_row(row).nth(y).unwrap_or(f64::NAN);
            preds.push(argmax(row));
        }
    }
    Ok((loss / data.seqs.len() as f64, preds))
}

/// Token-averaged next-token cross-entropy.
pub fn evaluate_causal(model: &ModelParams, data: &CausalData, completion_only: bool) -> Result<f64, TrainError> {
    model.check_arch(Arch::Decoder)?;
    if data.seqs.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let v = model.config.vocab_size;
    let mut total = 0.0;
    let mut count = 0usize;
    for (chunk, starts) in data.seqs.chunks(EVAL_CHUNK).zip(data.completion_start.chunks(EVAL_CHUNK)) {
        let refs: Vec<&TokenSeq> = chunk.iter().collect();
        let batch = Batch::from_seqs(&refs, &model.config)?;
        let targets = next_token_targets(&batch, completion_only.then_some(starts));
        let logits = crate::transformer::decoder_forward_batch(model, &batch)?;
        for (row, t) in logits.values().chunks(v).zip(&targets) {
            if let Some(t) = *t {
                total -= log_softmax_row(row).nth(t).unwrap_or(f64::NAN);
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

fn epoch_order(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/{epoch}")));
    }
    order
}

fn check_finite(loss: f64) -> Result<f64, TrainError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TrainError::Divergence("loss".into()))
    }
}

fn apply_step(
    model: &mut ModelParams,
    g: &Graph,
    bound: &crate::transformer::Weights<crate::tensor::Var>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let mut grads = model.gradients(g, bound);
    if let Some(max_norm) = cfg.grad_clip {
        clip_grad_norm(&mut grads, max_norm);
    }
    adamw_step(model, &grads, state, cfg)
}

/// Trains an encoder on labelled prompts. The returned `best` weights are
/// those of the epoch with the lowest validation loss (earliest on ties).
pub fn train_classifier(
    model: &mut ModelParams,
    train: &ClassifierData,
    val: &ClassifierData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.check_arch(Arch::Encoder)?;
    if train.seqs.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.seqs.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut state = AdamState::default();
    let mut dropout_rng = rng_for(cfg.seed, "dropout");
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.seqs.len(), cfg, epoch);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<&TokenSeq> = idx.iter().map(|&i| &train.seqs[i]).collect();
            let targets: Vec<Option<usize>> = idx.iter().map(|&i| Some(train.labels[i])).collect();
            let batch = Batch::from_seqs(&seqs, &model.config)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let logits = encoder_logits(model, &mut g, &bound, &batch, Some(&mut dropout_rng))?;
            let loss = g.cross_entropy(logits, &targets)?;
            loss_sum += check_finite(g.value(loss).values()[0])? * idx.len() as f64;
            g.backward(loss)?;
            apply_step(model, &g, &bound, &mut state, cfg)?;
        }
        let (val_loss, preds) = evaluate_classifier(model, val)?;
        let m = metrics(&preds, &val.labels)?;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.seqs.len() as f64,
            val_loss: check_finite(val_loss)?,
            accuracy: Some(m.accuracy),
            f1_macro: Some(m.f1_macro),
        };
        on_epoch(&row);
        if best.as_ref().is_none_or(|(_, l, _)| val_loss < *l) {
            best = Some((epoch, val_loss, model.clone()));
        }
        rows.push(row);
    }
    let (best_epoch, best_val_loss, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        report: TrainReport {
            arch: Arch::Encoder,
            epochs: rows,
            best_epoch,
            best_val_loss,
            lora: model.lora.as_ref().map(|_| crate::lora::report(model)),
        },
        best,
    })
}

/// Trains a decoder with next-token cross-entropy, averaged over target
/// tokens (all real positions, or completion tokens only).
pub fn train_causal(
    model: &mut ModelParams,
    train: &CausalData,
    val: &CausalData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model.check_arch(Arch::Decoder)?;
    if train.seqs.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.seqs.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut state = AdamState::default();
    let mut dropout_rng = rng_for(cfg.seed, "dropout");
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.seqs.len(), cfg, epoch);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<&TokenSeq> = idx.iter().map(|&i| &train.seqs[i]).collect();
            let starts: Vec<usize> = idx.iter().map(|&i| train.completion_start[i]).collect();
            let batch = Batch::from_seqs(&seqs, &model.config)?;
            let targets = next_token_targets(&batch, cfg.completion_only.then_some(&starts[..]));
            let n = targets.iter().flatten().count();
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let logits = decoder_logits(model, &mut g, &bound, &batch, Some(&mut dropout_rng))?;
            let loss = g.cross_entropy(logits, &targets)?;
            loss_sum += check_finite(g.value(loss).values()[0])? * n as f64;
            tokens += n;
            g.backward(loss)?;
            apply_step(model, &g, &bound, &mut state, cfg)?;
        }
        let val_loss = check_finite(evaluate_causal(model, val, cfg.completion_only)?)?;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / tokens.max(1) as f64,
            val_loss,
            accuracy: None,
            f1_macro: None,
        };
        on_epoch(&row);
        if best.as_ref().is_none_or(|(_, l, _)| val_loss < *l) {
            best = Some((epoch, val_loss, model.clone()));
        }
        rows.push(row);
    }
    let (best_epoch, best_val_loss, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        report: TrainReport {
            arch: Arch::Decoder,
            epochs: rows,
            best_epoch,
            best_val_loss,
            lora: model.lora.as_ref().map(|_| crate::lora::report(model)),
        },
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;

    fn tiny(arch: Arch) -> ModelParams {
        let cfg = ModelConfig {
            arch,
            vocab_size: 9,
            d_model: 4,
            n_heads: 1,
            n_layers: 1,
            d_ffn: 4,
            max_len: 6,
            n_classes: 4,
            dropout: 0.0,
        };
        ModelParams::init(cfg, 1).unwrap()
    }

    fn zero_grads(p: &ModelParams) -> Vec<Tensor> {
        let mut out = Vec::new();
        p.weights.visit(Subset::All, |_, t| out.push(Tensor::zeros(t.value.shape())));
        out
    }

    #[test]
    fn pure_decay_is_exact() {
        let mut p = tiny(Arch::Encoder);
        p.weights.visit_mut(Subset::All, |_, t| t.value.values_mut().fill(1.0));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            ..TrainConfig::desk(Arch::Encoder)
        };
        let grads = zero_grads(&p);
        adamw_step(&mut p, &grads, &mut AdamState::default(), &cfg).unwrap();
        p.weights.visit(Subset::All, |_, t| assert!(t.value.values().iter().all(|&w| w == 0.999)));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = tiny(Arch::Encoder);
        p.weights.visit_mut(Subset::All, |_, t| t.value.values_mut().fill(0.0));
        let mut grads = zero_grads(&p);
        for g in &mut grads {
            g.values_mut().fill(1.0);
        }
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::desk(Arch::Encoder)
        };
        adamw_step(&mut p, &grads, &mut AdamState::default(), &cfg).unwrap();
        let w = p.weights.tok_emb.value.values()[0];
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut p = tiny(Arch::Encoder);
        let before = p.clone();
        let mut grads = zero_grads(&p);
        grads[3].values_mut()[0] = f64::NAN;
        let err = adamw_step(&mut p, &grads, &mut AdamState::default(), &TrainConfig::desk(Arch::Encoder))
            .unwrap_err();
        assert_eq!(err.to_string(), "divergence detected in layers.0.ln1.bias");
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut p = tiny(Arch::Encoder);
        p.weights.tok_emb.trainable = false;
        let before = p.weights.tok_emb.value.clone();
        let mut grads = zero_grads(&p);
        grads[0].values_mut().fill(3.0);
        adamw_step(&mut p, &grads, &mut AdamState::default(), &TrainConfig::desk(Arch::Encoder)).unwrap();
        assert_eq!(p.weights.tok_emb.value, before);
    }

    #[test]
    fn hand_computed_metrics() {
        let m = metrics(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.per_class_f1[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class_f1[1].unwrap() - 0.8).abs() < 1e-15);
        assert!((m.f1_macro - 0.733_333_333_333_333_3).abs() < 1e-12);
        assert_eq!(m.per_class_f1[2], None);
        assert_eq!(m.confusion[0], [1, 1, 0, 0]);

        let perfect = metrics(&[3, 2, 0], &[3, 2, 0]).unwrap();
        assert_eq!((perfect.accuracy, perfect.f1_macro, perfect.f1_weighted), (1.0, 1.0, 1.0));
        assert_eq!(metrics(&[1], &[1]).unwrap().f1_macro, 1.0);
        assert!(matches!(metrics(&[1, 2], &[1]), Err(TrainError::LengthMismatch { .. })));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].values()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn presets() {
        let p = TrainConfig::preset("finetune-encoder").unwrap();
        assert_eq!((p.learning_rate, p.batch_size, p.epochs), (2e-5, 32, 3));
        let p = TrainConfig::preset("finetune-decoder").unwrap();
        assert_eq!((p.learning_rate, p.batch_size, p.epochs), (5e-5, 4, 2));
        assert!(TrainConfig::preset("fast").is_err());
    }

    #[test]
    fn table_headers() {
        let report = TrainReport {
            arch: Arch::Decoder,
            epochs: vec![EpochMetrics {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                accuracy: None,
                f1_macro: None,
            }],
            best_epoch: 1,
            best_val_loss: 0.25,
            lora: None,
        };
        let t = report.render_table();
        assert!(t.starts_with("Epoch  Training Loss  Validation Loss\n"), "{t}");
        let json = serde_json::to_string(&report.epochs[0]).unwrap();
        assert!(!json.contains("accuracy"));
    }
}
