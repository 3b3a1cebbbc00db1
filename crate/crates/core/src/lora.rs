//! Low-rank adapters on the attention projections.
//!
//! For a target `W: [d_in, d_out]` the adapted projection is
//! `x W + b + (alpha / r) (x A^T) B^T` with `A: [r, d_in]` and `B: [d_out, r]`.
//! `B` starts at zero, so an adapted model reproduces its base exactly until
//! the first update.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::tensor::{kernels, Tensor};
use crate::transformer::{Arch, LoraPair, ModelParams, Param, Projection, Subset};

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("invalid LoRA config: {0}")]
    Config(String),
    #[error("unknown target projection {0:?}")]
    UnknownTarget(String),
    #[error("model already carries adapters")]
    AlreadyAdapted,
    #[error("no adapters present")]
    NoAdapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    /// Keeps the classification head trainable. The tied LM head of a
    /// decoder is the token embedding and stays frozen either way.
    pub train_head: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec![Projection::Wq, Projection::Wv],
            train_head: true,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Parses target names such as `"wq,wv"`.
    pub fn parse_targets(list: &str) -> Result<Vec<Projection>, LoraError> {
        list.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse().map_err(|_| LoraError::UnknownTarget(s.trim().to_string())))
            .collect()
    }

    pub fn validate(&self) -> Result<(), LoraError> {
        if self.rank == 0 {
            return Err(LoraError::Config("rank must be at least 1".into()));
        }
        if self.targets.is_empty() {
            return Err(LoraError::Config("no target projections".into()));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(LoraError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Adds adapters to every layer's target projections and freezes all other
/// tensors except (optionally) the classification head. `A` entries are
/// uniform in `[-1/sqrt(d_in), 1/sqrt(d_in))`, drawn from the `"lora"`
/// stream of `seed`.
pub fn inject(params: &ModelParams, cfg: &LoraConfig, seed: u64) -> Result<ModelParams, LoraError> {
    cfg.validate()?;
    if params.has_adapters() {
        return Err(LoraError::AlreadyAdapted);
    }
    let mut out = params.clone();
    out.freeze_all();
    if cfg.train_head {
        if let Some(head) = &mut out.weights.head {
            head.w.trainable = true;
            head.b.trainable = true;
        }
    }
    let mut rng = rng_for(seed, "lora");
    let mut targets = cfg.targets.clone();
    targets.sort();
    targets.dedup();
    for layer in &mut out.weights.layers {
        for &p in &targets {
            let shape = layer.projection(p).0.value.shape().to_vec();
            let (d_in, d_out) = (shape[0], shape[1]);
            let a = Tensor::uniform(&[cfg.rank, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng);
            let b = Tensor::zeros(&[d_out, cfg.rank]);
            *layer.adapter_mut(p) = Some(LoraPair {
                a: Param {
                    value: a,
                    trainable: true,
                },
                b: Param {
                    value: b,
                    trainable: true,
                },
            });
        }
    }
    out.lora = Some(LoraConfig {
        targets,
        ..cfg.clone()
    });
    Ok(out)
}

/// Closed-form trainable count after [`inject`]:
/// `n_layers * sum_targets r (d_in + d_out)` plus the head when trained.
pub fn expected_trainable(params: &ModelParams, cfg: &LoraConfig) -> usize {
    let c = &params.config;
    let mut targets = cfg.targets.clone();
    targets.sort();
    targets.dedup();
    let adapters = c.n_layers * targets.len() * cfg.rank * (c.d_model + c.d_model);
    let head = if cfg.train_head && c.arch == Arch::Encoder {
        c.d_model * c.n_classes + c.n_classes
    } else {
        0
    };
    adapters + head
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraReport {
    pub trainable: usize,
    pub total: usize,
    pub reduction_percent: f64,
}

impl LoraReport {
    pub fn from_counts(total: usize, trainable: usize) -> Self {
        let reduction_percent = if total == 0 {
            0.0
        } else {
            100.0 * (total - trainable.min(total)) as f64 / total as f64
        };
        Self {
            trainable,
            total,
            reduction_percent,
        }
    }
}

impl fmt::Display for LoraReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trainable params: {} || total params: {} || reduction: {:.2}%",
            self.trainable, self.total, self.reduction_percent
        )
    }
}

pub fn report(params: &ModelParams) -> LoraReport {
    LoraReport::from_counts(params.count_parameters(false), params.count_parameters(true))
}

/// Folds adapters into their base weights: `W += (alpha / r) (B A)^T`.
/// The result has no adapters and every tensor trainable.
pub fn merge(params: &ModelParams) -> Result<ModelParams, LoraError> {
    let cfg = params.lora.as_ref().ok_or(LoraError::NoAdapters)?;
    if !params.has_adapters() {
        return Err(LoraError::NoAdapters);
    }
    let scale = cfg.scale();
    let mut out = params.clone();
    for layer in &mut out.weights.layers {
        for p in Projection::ALL {
            let Some(pair) = layer.adapter_mut(p).take() else {
                continue;
            };
            let (r, d_in) = (pair.a.value.shape()[0], pair.a.value.shape()[1]);
            let d_out = pair.b.value.shape()[0];
            // (B A)^T = A^T B^T: [d_in, r] x [r, d_out]
            let mut delta = vec![0.0; d_in * d_out];
            let bt = kernels::transpose(pair.b.value.values(), d_out, r);
            kernels::mm_tn(pair.a.value.values(), &bt, &mut delta, r, d_in, d_out);
            let w = layer.projection_weight_mut(p);
            for (wi, di) in w.value.values_mut().iter_mut().zip(&delta) {
                *wi += scale * di;
            }
        }
    }
    out.lora = None;
    out.weights.visit_mut(Subset::All, |_, p| p.trainable = true);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{encoder_forward, ModelConfig};
    use crate::tokenizer::TokenSeq;

    fn model() -> ModelParams {
        let mut cfg = ModelConfig::new(Arch::Encoder, 20);
        cfg.d_model = 16;
        cfg.d_ffn = 32;
        cfg.max_len = 12;
        ModelParams::init(cfg, 5).unwrap()
    }

    #[test]
    fn full_scale_reduction_prints_two_decimals() {
        let r = LoraReport::from_counts(67_587_080, 630_532);
        assert!(r.to_string().ends_with("reduction: 99.07%"), "{r}");
        assert_eq!(format!("{:.2}", LoraReport::from_counts(10, 10).reduction_percent), "0.00");
    }

    #[test]
    fn default_desk_model_trainable_count() {
        let base = ModelParams::init(ModelConfig::new(Arch::Encoder, 60), 1).unwrap();
        let adapted = inject(&base, &LoraConfig::default(), 1).unwrap();
        let rep = report(&adapted);
        // 2 layers x 2 targets x 8 (64 + 64) + (64 x 4 + 4)
        assert_eq!(rep.trainable, 4096 + 260);
        assert_eq!(rep.trainable, expected_trainable(&base, &LoraConfig::default()));
        assert_eq!(rep.total, base.count_parameters(false) + 4096);
        assert!(rep.reduction_percent >= 90.0);
    }

    #[test]
    fn unknown_target_is_rejected() {
        assert!(matches!(
            LoraConfig::parse_targets("wq,wz"),
            Err(LoraError::UnknownTarget(t)) if t == "wz"
        ));
        assert_eq!(
            LoraConfig::parse_targets("WQ, wo").unwrap(),
            vec![Projection::Wq, Projection::Wo]
        );
    }

    #[test]
    fn identity_at_init_and_double_merge() {
        let base = model();
        let adapted = inject(&base, &LoraConfig::default(), 9).unwrap();
        let seq = TokenSeq {
            ids: vec![2, 7, 9, 11, 4, 0],
            attention_mask: vec![1, 1, 1, 1, 1, 0],
            length: 5,
        };
        let a = encoder_forward(&base, &[&seq]).unwrap();
        let b = encoder_forward(&adapted, &[&seq]).unwrap();
        assert_eq!(a.values(), b.values());
        let merged = merge(&adapted).unwrap();
        assert_eq!(merged.weights.layers[0].wq, base.weights.layers[0].wq);
        assert!(matches!(merge(&merged), Err(LoraError::NoAdapters)));
        assert_eq!(LoraError::NoAdapters.to_string(), "no adapters present");
    }
}
