//! Binary checkpoints plus a JSON sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "WPLM"
//! version    u32
//! kind       u32      0 = model, 1 = adapters
//! arch       u32      0 = encoder, 1 = decoder
//! config     7 x u64  vocab_size d_model n_heads n_layers d_ffn max_len n_classes
//! n_tensors  u64
//! tensors    n_tensors x (u64 element count, count x f64)
//! ```
//!
//! Tensors follow the canonical order of [`Weights::visit`]. The sidecar
//! (`<name>.json`) holds the full config, the vocabulary hash, tensor names
//! and, for adapters, the LoRA config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Arch, ModelConfig, ModelError, ModelParams, Subset};
use crate::dataset::write_atomic;
use crate::lora::{inject, LoraConfig};

pub const MAGIC: &[u8; 4] = b"WPLM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub lora: Option<LoraConfig>,
    pub tensors: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn config_ints(c: &ModelConfig) -> [u64; 7] {
    [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_ffn, c.max_len, c.n_classes].map(|v| v as u64)
}

/// Serializes a header and the given tensor values.
pub fn write_checkpoint(kind: CheckpointKind, config: &ModelConfig, tensors: &[&[f64]]) -> Vec<u8> {
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(80 + 8 * (total + tensors.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let kind = match kind {
        CheckpointKind::Model => 0u32,
        CheckpointKind::Adapters => 1,
    };
    buf.extend_from_slice(&kind.to_le_bytes());
    let arch = match config.arch {
        Arch::Encoder => 0u32,
        Arch::Decoder => 1,
    };
    buf.extend_from_slice(&arch.to_le_bytes());
    for v in config_ints(config) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for x in *t {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

/// Parsed checkpoint body.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub kind: CheckpointKind,
    pub arch: Arch,
    pub config: [u64; 7],
    pub tensors: Vec<Vec<f64>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = match r.u32()? {
        0 => CheckpointKind::Model,
        1 => CheckpointKind::Adapters,
        k => return Err(ModelError::Checkpoint(format!("unknown kind {k}"))),
    };
    let arch = match r.u32()? {
        0 => Arch::Encoder,
        1 => Arch::Decoder,
        a => return Err(ModelError::Checkpoint(format!("unknown arch {a}"))),
    };
    let mut config = [0u64; 7];
    for c in &mut config {
        *c = r.u64()?;
    }
    let n = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u64()? as usize;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?)?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(RawCheckpoint {
        kind,
        arch,
        config,
        tensors,
    })
}

fn collect(params: &ModelParams, subset: Subset) -> (Vec<String>, Vec<&[f64]>) {
    let mut names = Vec::new();
    let mut values = Vec::new();
    params.weights.visit(subset, |name, p| {
        names.push(name.to_string());
        values.push(p.value.values());
    });
    (names, values)
}

fn write_pair(path: &Path, bin: &[u8], sidecar: &ModelSidecar) -> Result<(), ModelError> {
    write_atomic(path, bin).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_vec_pretty(sidecar).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&side, &json).map_err(io_err(&side))
}

fn read_pair(path: &Path) -> Result<(RawCheckpoint, ModelSidecar), ModelError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let raw = read_checkpoint(&bytes)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let sidecar: ModelSidecar =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", side.display())))?;
    if raw.kind != sidecar.kind || raw.arch != sidecar.config.arch || raw.config != config_ints(&sidecar.config) {
        return Err(ModelError::Checkpoint(format!(
            "{} disagrees with its sidecar",
            path.display()
        )));
    }
    if raw.tensors.len() != sidecar.tensors.len() {
        return Err(ModelError::Checkpoint("tensor count disagrees with sidecar".into()));
    }
    Ok((raw, sidecar))
}

fn fill(params: &mut ModelParams, subset: Subset, tensors: Vec<Vec<f64>>) -> Result<(), ModelError> {
    let mut iter = tensors.into_iter();
    let mut err = None;
    params.weights.visit_mut(subset, |name, p| {
        if err.is_some() {
            return;
        }
        match iter.next() {
            Some(values) if values.len() == p.value.numel() => p.value.values_mut().copy_from_slice(&values),
            Some(values) => {
                err = Some(format!(
                    "{name}: expected {} values, found {}",
                    p.value.numel(),
                    values.len()
                ))
            }
            None => err = Some(format!("{name}: missing tensor")),
        }
    });
    if iter.next().is_some() {
        err.get_or_insert_with(|| "extra tensors in checkpoint".into());
    }
    err.map_or(Ok(()), |e| Err(ModelError::Checkpoint(e)))
}

/// Writes the base weights (adapters excluded) to `path` and the sidecar
/// next to it.
pub fn save_model(params: &ModelParams, vocab_hash: &str, path: &Path) -> Result<(), ModelError> {
    let (names, values) = collect(params, Subset::Base);
    let bin = write_checkpoint(CheckpointKind::Model, &params.config, &values);
    let sidecar = ModelSidecar {
        kind: CheckpointKind::Model,
        config: params.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        lora: None,
        tensors: names,
    };
    write_pair(path, &bin, &sidecar)
}

/// Writes only the adapter tensors and the LoRA config.
pub fn save_adapters(params: &ModelParams, vocab_hash: &str, path: &Path) -> Result<(), ModelError> {
    let lora = params
        .lora
        .clone()
        .ok_or_else(|| ModelError::Checkpoint("model has no adapters".into()))?;
    let (names, values) = collect(params, Subset::Adapters);
    let bin = write_checkpoint(CheckpointKind::Adapters, &params.config, &values);
    let sidecar = ModelSidecar {
        kind: CheckpointKind::Adapters,
        config: params.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        lora: Some(lora),
        tensors: names,
    };
    write_pair(path, &bin, &sidecar)
}

pub fn load_model(path: &Path) -> Result<(ModelParams, ModelSidecar), ModelError> {
    let (raw, sidecar) = read_pair(path)?;
    if raw.kind != CheckpointKind::Model {
        return Err(ModelError::Checkpoint(format!("{} holds adapters, not a model", path.display())));
    }
    let mut params = ModelParams::init(sidecar.config.clone(), 0)?;
    fill(&mut params, Subset::Base, raw.tensors)?;
    Ok((params, sidecar))
}

/// Attaches saved adapters to `base`, whose config must match. The result
/// has the same trainability as a fresh injection.
pub fn load_adapters(base: &ModelParams, path: &Path) -> Result<(ModelParams, ModelSidecar), ModelError> {
    let (raw, sidecar) = read_pair(path)?;
    if raw.kind != CheckpointKind::Adapters {
        return Err(ModelError::Checkpoint(format!("{} holds a model, not adapters", path.display())));
    }
    if sidecar.config != base.config {
        return Err(ModelError::Checkpoint("adapter config does not match the base model".into()));
    }
    let lora = sidecar
        .lora
        .clone()
        .ok_or_else(|| ModelError::Checkpoint("adapter sidecar lacks a LoRA config".into()))?;
    let mut params = inject(base, &lora, 0).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fill(&mut params, Subset::Adapters, raw.tensors)?;
    Ok((params, sidecar))
}
