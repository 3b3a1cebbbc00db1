//! Run configuration.
//!
//! On disk a config is one JSON object with flat dotted keys such as
//! `"train.learning_rate"`. Resolution order, later wins: built-in defaults,
//! `--preset`, `--config` file, then individual flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::CliError;
use crate::dataset::{snr_grid, DatasetConfig, DEFAULT_DECIMALS, DEFAULT_PREVIEW_LEN};
use crate::lora::LoraConfig;
use crate::sigsynth::ModulationKind;
use crate::trainer::{TrainConfig, N_CLASSES};
use crate::transformer::{Arch, ModelConfig, Projection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub modulations: Vec<ModulationKind>,
    pub snr_min: f64,
    pub snr_max: f64,
    pub snr_step: f64,
    pub frames_per_pair: usize,
    pub split_fracs: [f64; 3],
    pub preview_len: usize,
    pub decimals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelSection {
    /// The section that reproduces `config`.
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            n_heads: config.n_heads,
            n_layers: config.n_layers,
            d_ffn: config.d_ffn,
            max_len: config.max_len,
            dropout: config.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shuffle: bool,
    pub grad_clip: Option<f64>,
    pub completion_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub enabled: bool,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    pub train_head: bool,
}

/// Every setting a command may consume. The single `seed` feeds dataset
/// generation, initialization, adapters, dropout and shuffling through
/// role-derived streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub lora: LoraSection,
}

impl TrainSection {
    fn from_train_config(t: &TrainConfig) -> Self {
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            shuffle: t.shuffle,
            grad_clip: t.grad_clip,
            completion_only: t.completion_only,
        }
    }
}

impl RunConfig {
    /// Built-in defaults; training hyperparameters depend on `arch`.
    pub fn defaults(arch: Arch) -> Self {
        let data = DatasetConfig::default();
        let model = ModelConfig::new(arch, 0);
        let lora = LoraConfig::default();
        let train = TrainConfig::desk(arch);
        Self {
            seed: data.seed,
            data: DataSection {
                modulations: data.modulations,
                snr_min: -20.0,
                snr_max: 30.0,
                snr_step: 2.0,
                frames_per_pair: data.frames_per_pair,
                split_fracs: data.split_fracs,
                preview_len: DEFAULT_PREVIEW_LEN,
                decimals: DEFAULT_DECIMALS,
            },
            model: ModelSection {
                d_model: model.d_model,
                n_heads: model.n_heads,
                n_layers: model.n_layers,
                d_ffn: model.d_ffn,
                max_len: model.max_len,
                dropout: model.dropout,
            },
            train: TrainSection::from_train_config(&train),
            lora: LoraSection {
                enabled: false,
                rank: lora.rank,
                alpha: lora.alpha,
                targets: lora.targets,
                train_head: lora.train_head,
            },
        }
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<(), CliError> {
        let preset = TrainConfig::preset(name).map_err(|e| CliError::Usage(e.to_string()))?;
        self.train = TrainSection::from_train_config(&preset);
        Ok(())
    }

    /// Flat dotted-key view, keys sorted.
    pub fn to_flat(&self) -> Map<String, Value> {
        let nested = serde_json::to_value(self).expect("config serializes");
        let mut out = Map::new();
        flatten("", &nested, &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes");
        s.push('\n');
        s
    }

    /// Overrides the given dotted keys. Unknown keys and ill-typed values
    /// are usage errors.
    pub fn merge_flat(&mut self, flat: &Map<String, Value>) -> Result<(), CliError> {
        let mut nested = serde_json::to_value(&*self).expect("config serializes");
        for (key, value) in flat {
            set_path(&mut nested, key, value.clone())?;
        }
        *self = serde_json::from_value(nested).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let Value::Object(flat) = value else {
            return Err(CliError::Usage(format!("{}: expected a JSON object", path.display())));
        };
        self.merge_flat(&flat)
    }

    /// `key=value` override; the value is read as JSON, or as a string when
    /// it does not parse.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got {assignment:?}")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut flat = Map::new();
        flat.insert(key.trim().to_string(), value);
        self.merge_flat(&flat)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.data;
        DatasetConfig {
            modulations: d.modulations.clone(),
            snr_levels: snr_grid(d.snr_min, d.snr_max, d.snr_step),
            frames_per_pair: d.frames_per_pair,
            split_fracs: d.split_fracs,
            seed: self.seed,
            preview_len: d.preview_len,
            decimals: d.decimals,
        }
    }

    pub fn model_config(&self, arch: Arch, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            arch,
            vocab_size,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ffn: m.d_ffn,
            max_len: m.max_len,
            n_classes: N_CLASSES,
            dropout: m.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            seed: self.seed,
            shuffle: t.shuffle,
            grad_clip: t.grad_clip,
            completion_only: t.completion_only,
        }
    }

    pub fn lora_config(&self) -> Option<LoraConfig> {
        let l = &self.lora;
        l.enabled.then(|| LoraConfig {
            rank: l.rank,
            alpha: l.alpha,
            targets: l.targets.clone(),
            train_head: l.train_head,
        })
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Usage(format!("unknown config key {key:?}"));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let map = node.as_object_mut().ok_or_else(unknown)?;
        let slot = map.get_mut(part).ok_or_else(unknown)?;
        if parts.peek().is_none() {
            if slot.is_object() {
                return Err(unknown());
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}
