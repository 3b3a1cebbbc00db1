//! Labeled prompt datasets.
//!
//! Each synthesized frame becomes one [`PromptExample`]. The label is a pure
//! function of the frame's SNR:
//!
//! | class | name           | SNR range (dB)     |
//! |-------|----------------|--------------------|
//! | 0     | Low Noise      | snr > 15           |
//! | 1     | Moderate Noise | 5 < snr <= 15      |
//! | 2     | High Noise     | -10 < snr <= 5     |
//! | 3     | Severe Noise   | snr <= -10         |
//!
//! Only the low-SNR branch of frame-loss pathologies is modelled. Medium
//! contention (802.11 and non-802.11) and the 802.11 impairments (hidden
//! terminal, capture effect) are not observable from a single I/Q frame.

mod io;
mod prompt;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_seed, rng_for};
use crate::sigsynth::{synth_frame, ModulationKind, SynthError, FRAME_LEN};

pub use io::{load_examples, load_manifest, save_examples, save_manifest, write_atomic};
pub use prompt::{
    format_fixed, format_iq_preview, format_snr, render_prompt, ANSWER_CUE, DEFAULT_DECIMALS,
    DEFAULT_PREVIEW_LEN, INSTRUCTION, INTRO, TEMPLATE_VERSION,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid SNR: {0}")]
    InvalidSnr(f64),
    #[error("preview length {requested} out of range 1..={available}")]
    PreviewLength { requested: usize, available: usize },
    #[error("modulation list is empty")]
    NoModulations,
    #[error("SNR grid is empty")]
    NoSnrLevels,
    #[error("frames per (modulation, SNR) pair must be at least 1")]
    NoFrames,
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    SplitFractions([f64; 3]),
    #[error("invalid class label {0}")]
    InvalidLabel(i64),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("line {line}: field `{field}`: {reason}")]
    Malformed { line: usize, field: String, reason: String },
    #[error("line {line}: label/SNR mismatch (stored {stored}, SNR {snr_db} implies {derived})")]
    LabelMismatch { line: usize, stored: u8, snr_db: f64, derived: u8 },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// The four noise-driven pathology classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PathologyClass {
    LowNoise,
    ModerateNoise,
    HighNoise,
    SevereNoise,
}

impl PathologyClass {
    pub const ALL: [PathologyClass; 4] = [
        PathologyClass::LowNoise,
        PathologyClass::ModerateNoise,
        PathologyClass::HighNoise,
        PathologyClass::SevereNoise,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            PathologyClass::LowNoise => "Low Noise",
            PathologyClass::ModerateNoise => "Moderate Noise",
            PathologyClass::HighNoise => "High Noise",
            PathologyClass::SevereNoise => "Severe Noise",
        }
    }

    pub fn from_label(label: i64) -> Result<Self, DatasetError> {
        usize::try_from(label)
            .ok()
            .and_then(|l| Self::ALL.get(l).copied())
            .ok_or(DatasetError::InvalidLabel(label))
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// Serialized as the class name.
impl Serialize for PathologyClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PathologyClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Self::from_name(&name).ok_or_else(|| serde::de::Error::custom(format!("unknown class {name:?}")))
    }
}

impl fmt::Display for PathologyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Applies the SNR labeling policy. Upper edges are inclusive.
pub fn label_for_snr(snr_db: f64) -> Result<PathologyClass, DatasetError> {
    if !snr_db.is_finite() {
        return Err(DatasetError::InvalidSnr(snr_db));
    }
    Ok(if snr_db > 15.0 {
        PathologyClass::LowNoise
    } else if snr_db > 5.0 {
        PathologyClass::ModerateNoise
    } else if snr_db > -10.0 {
        PathologyClass::HighNoise
    } else {
        PathologyClass::SevereNoise
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DatasetError::UnknownSplit(other.to_string())),
        }
    }
}

/// One rendered prompt with its derived label.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptExample {
    pub prompt: String,
    pub label: PathologyClass,
    pub snr_db: f64,
    pub modulation: ModulationKind,
    pub frame_seed: u64,
    pub split: Split,
}

/// `-20, -18, ..., 30`: the RadioML SNR grid.
pub fn radioml_snr_grid() -> Vec<f64> {
    snr_grid(-20.0, 30.0, 2.0)
}

/// Inclusive arithmetic grid `min, min + step, ..., <= max`.
pub fn snr_grid(min: f64, max: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || !min.is_finite() || !max.is_finite() || max < min {
        return Vec::new();
    }
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|k| min + k as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub modulations: Vec<ModulationKind>,
    pub snr_levels: Vec<f64>,
    pub frames_per_pair: usize,
    pub split_fracs: [f64; 3],
    pub seed: u64,
    pub preview_len: usize,
    pub decimals: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            modulations: ModulationKind::DEFAULT_SET.to_vec(),
            snr_levels: radioml_snr_grid(),
            frames_per_pair: 20,
            split_fracs: [0.8, 0.1, 0.1],
            seed: 1,
            preview_len: DEFAULT_PREVIEW_LEN,
            decimals: DEFAULT_DECIMALS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub modulation: ModulationKind,
    pub snr_db: f64,
    pub count: usize,
}

/// Summary of a generated dataset, persisted next to the examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub template_version: u32,
    pub preview_len: usize,
    pub decimals: usize,
    pub seed: u64,
    pub frames_per_pair: usize,
    pub split_fracs: [f64; 3],
    pub modulations: Vec<ModulationKind>,
    pub snr_levels: Vec<f64>,
    pub cells: Vec<CellCount>,
    /// Per split, example counts indexed by class label.
    pub class_counts: BTreeMap<Split, [usize; 4]>,
    pub total: usize,
}

/// Frames in a full dataset: modulations x SNR levels x frames per pair.
pub fn manifest_total(n_modulations: usize, n_snr_levels: usize, frames_per_pair: usize) -> usize {
    n_modulations * n_snr_levels * frames_per_pair
}

fn frame_role(modulation: ModulationKind, snr_db: f64, index: usize) -> String {
    format!("frame/{}/{}/{}", modulation.name(), format_snr(snr_db), index)
}

/// Synthesizes, labels, renders and splits a dataset.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<(Vec<PromptExample>, DatasetManifest), DatasetError> {
    if cfg.modulations.is_empty() {
        return Err(DatasetError::NoModulations);
    }
    if cfg.snr_levels.is_empty() {
        return Err(DatasetError::NoSnrLevels);
    }
    if cfg.frames_per_pair == 0 {
        return Err(DatasetError::NoFrames);
    }
    let sum: f64 = cfg.split_fracs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || cfg.split_fracs.iter().any(|f| *f < 0.0) {
        return Err(DatasetError::SplitFractions(cfg.split_fracs));
    }
    if cfg.preview_len == 0 || cfg.preview_len > FRAME_LEN {
        return Err(DatasetError::PreviewLength {
            requested: cfg.preview_len,
            available: FRAME_LEN,
        });
    }

    let mut examples = Vec::with_capacity(manifest_total(
        cfg.modulations.len(),
        cfg.snr_levels.len(),
        cfg.frames_per_pair,
    ));
    let mut cells = Vec::new();
    for &modulation in &cfg.modulations {
        for &snr_db in &cfg.snr_levels {
            let label = label_for_snr(snr_db)?;
            for k in 0..cfg.frames_per_pair {
                let frame_seed = derive_seed(cfg.seed, &frame_role(modulation, snr_db, k));
                let frame = synth_frame(modulation, snr_db, FRAME_LEN, frame_seed)?;
                examples.push(PromptExample {
                    prompt: render_prompt(&frame, cfg.preview_len, cfg.decimals)?,
                    label,
                    snr_db,
                    modulation,
                    frame_seed,
                    split: Split::Train,
                });
            }
            cells.push(CellCount {
                modulation,
                snr_db,
                count: cfg.frames_per_pair,
            });
        }
    }

    assign_splits(&mut examples, cfg.split_fracs, cfg.seed);

    let manifest = DatasetManifest {
        template_version: TEMPLATE_VERSION,
        preview_len: cfg.preview_len,
        decimals: cfg.decimals,
        seed: cfg.seed,
        frames_per_pair: cfg.frames_per_pair,
        split_fracs: cfg.split_fracs,
        modulations: cfg.modulations.clone(),
        snr_levels: cfg.snr_levels.clone(),
        cells,
        class_counts: class_counts(&examples),
        total: examples.len(),
    };
    Ok((examples, manifest))
}

/// Stratified assignment: within each class, a seeded shuffle, then the
/// first `round(n * train)` go to train, the next `round(n * val)` to val.
fn assign_splits(examples: &mut [PromptExample], fracs: [f64; 3], seed: u64) {
    let mut rng = rng_for(seed, "split");
    for class in PathologyClass::ALL {
        let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = ((n * fracs[0]).round() as usize).min(idx.len());
        let n_val = ((n * fracs[1]).round() as usize).min(idx.len() - n_train);
        for (pos, &i) in idx.iter().enumerate() {
            examples[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
}

pub fn class_counts(examples: &[PromptExample]) -> BTreeMap<Split, [usize; 4]> {
    let mut counts: BTreeMap<Split, [usize; 4]> = Split::ALL.iter().map(|s| (*s, [0; 4])).collect();
    for ex in examples {
        counts.get_mut(&ex.split).expect("all splits present")[ex.label.label() as usize] += 1;
    }
    counts
}

/// Examples belonging to `split`, in dataset order.
pub fn split_of(examples: &[PromptExample], split: Split) -> Vec<&PromptExample> {
    examples.iter().filter(|e| e.split == split).collect()
}
