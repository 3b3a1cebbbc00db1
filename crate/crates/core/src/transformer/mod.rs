//! Desk-scale transformers: a bidirectional encoder with a 4-way
//! classification head read from the CLS position, and a causal decoder
//! whose LM head is tied to the token embedding.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))`, then `x + FFN(LN(x))`, with a
//! final layer norm before the head. Positions use a learned embedding.
//!
//! Parameter count, with `V` vocab, `L` max length, `d` model width, `f` FFN
//! width, `n` layers and `c` classes:
//!
//! ```text
//! total = V*d + L*d + n*(4*d^2 + 2*d*f + 9*d + f) + 2*d + head
//! head  = d*c + c   (encoder)
//!       = 0         (decoder, tied)
//! ```
//!
//! LoRA adapters add `r * (d_in + d_out)` per adapted projection.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::LoraConfig;
use crate::seed::rng_for;
use crate::tensor::{AttnMask, Graph, Tensor, TensorError, Var};
use crate::tokenizer::TokenSeq;

pub use checkpoint::{
    load_adapters, load_model, read_checkpoint, save_adapters, save_model, write_checkpoint, CheckpointKind,
    ModelSidecar, RawCheckpoint, MAGIC, VERSION,
};

pub const LN_EPS: f64 = 1e-5;
/// Std of the embeddings and the classifier head at init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("operation needs a {expected} model, got {actual}")]
    WrongArch { expected: Arch, actual: Arch },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Encoder,
    Decoder,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Encoder => "encoder",
            Arch::Decoder => "decoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(arch: Arch, vocab_size: usize) -> Self {
        Self {
            arch,
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 256,
            max_len: 256,
            n_classes: 4,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.arch == Arch::Encoder && self.n_classes != 4 {
            return bad(format!("classifier needs 4 classes, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count of the base model (no adapters).
    pub fn param_count_formula(&self) -> usize {
        let (v, l, d, f, n, c) = (
            self.vocab_size,
            self.max_len,
            self.d_model,
            self.d_ffn,
            self.n_layers,
            self.n_classes,
        );
        let head = match self.arch {
            Arch::Encoder => d * c + c,
            Arch::Decoder => 0,
        };
        v * d + l * d + n * (4 * d * d + 2 * d * f + 9 * d + f) + 2 * d + head
    }
}

/// A tensor plus its trainability flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor) -> Self {
        Self { value, trainable: true }
    }
}

/// Attention projections that can carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Wq, Projection::Wk, Projection::Wv, Projection::Wo];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Wq => "wq",
            Projection::Wk => "wk",
            Projection::Wv => "wv",
            Projection::Wo => "wo",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown projection {s:?} (expected wq, wk, wv or wo)"))
    }
}

/// Low-rank pair: `a` is `[r, d_in]`, `b` is `[d_out, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub a: T,
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    /// Indexed by [`Projection`].
    pub adapters: [Option<LoraPair<T>>; 4],
}

impl<T> LayerWeights<T> {
    pub fn projection(&self, p: Projection) -> (&T, &T) {
        match p {
            Projection::Wq => (&self.wq, &self.bq),
            Projection::Wk => (&self.wk, &self.bk),
            Projection::Wv => (&self.wv, &self.bv),
            Projection::Wo => (&self.wo, &self.bo),
        }
    }

    pub fn projection_weight_mut(&mut self, p: Projection) -> &mut T {
        match p {
            Projection::Wq => &mut self.wq,
            Projection::Wk => &mut self.wk,
            Projection::Wv => &mut self.wv,
            Projection::Wo => &mut self.wo,
        }
    }

    pub fn adapter(&self, p: Projection) -> Option<&LoraPair<T>> {
        self.adapters[p.slot()].as_ref()
    }

    pub fn adapter_mut(&mut self, p: Projection) -> &mut Option<LoraPair<T>> {
        &mut self.adapters[p.slot()]
    }

    fn base_fields(&self) -> [(&'static str, &T); 16] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn base_fields_mut(&mut self) -> [(&'static str, &mut T); 16] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub w: T,
    pub b: T,
}

/// All weights of a model. `Weights<Param>` holds values; `Weights<Var>`
/// is the same model bound into a [`Graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub head: Option<Head<T>>,
}

/// Which tensors a traversal covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    Base,
    Adapters,
}

impl<T> Weights<T> {
    /// Canonical order: embeddings, layers (16 tensors each), final norm,
    /// head; then every adapter (`a`, `b`) by layer and projection.
    pub fn visit<'a>(&'a self, subset: Subset, mut f: impl FnMut(&str, &'a T)) {
        if subset != Subset::Adapters {
            f("tok_emb", &self.tok_emb);
            f("pos_emb", &self.pos_emb);
            for (i, layer) in self.layers.iter().enumerate() {
                for (name, t) in layer.base_fields() {
                    f(&format!("layers.{i}.{name}"), t);
                }
            }
            f("lnf.gain", &self.lnf_gain);
            f("lnf.bias", &self.lnf_bias);
            if let Some(head) = &self.head {
                f("head.w", &head.w);
                f("head.b", &head.b);
            }
        }
        if subset != Subset::Base {
            for (i, layer) in self.layers.iter().enumerate() {
                for p in Projection::ALL {
                    if let Some(pair) = layer.adapter(p) {
                        f(&format!("layers.{i}.lora_{}.a", p.name()), &pair.a);
                        f(&format!("layers.{i}.lora_{}.b", p.name()), &pair.b);
                    }
                }
            }
        }
    }

    pub fn visit_mut(&mut self, subset: Subset, mut f: impl FnMut(&str, &mut T)) {
        if subset != Subset::Adapters {
            f("tok_emb", &mut self.tok_emb);
            f("pos_emb", &mut self.pos_emb);
            for (i, layer) in self.layers.iter_mut().enumerate() {
                for (name, t) in layer.base_fields_mut() {
                    f(&format!("layers.{i}.{name}"), t);
                }
            }
            f("lnf.gain", &mut self.lnf_gain);
            f("lnf.bias", &mut self.lnf_bias);
            if let Some(head) = &mut self.head {
                f("head.w", &mut head.w);
                f("head.b", &mut head.b);
            }
        }
        if subset != Subset::Base {
            for (i, layer) in self.layers.iter_mut().enumerate() {
                for p in Projection::ALL {
                    if let Some(pair) = layer.adapter_mut(p) {
                        f(&format!("layers.{i}.lora_{}.a", p.name()), &mut pair.a);
                        f(&format!("layers.{i}.lora_{}.b", p.name()), &mut pair.b);
                    }
                }
            }
        }
    }

    /// Rebuilds the structure from values listed in canonical order.
    pub fn with_values<U: Clone>(&self, values: &[U]) -> Option<Weights<U>> {
        let mut slots: Weights<Option<U>> = self.map(|_| None);
        let mut it = values.iter();
        slots.visit_mut(Subset::All, |_, slot| *slot = it.next().cloned());
        if it.next().is_some() {
            return None;
        }
        let mut ok = true;
        let out = slots.map(|s| {
            ok &= s.is_some();
            s.clone()
        });
        ok.then(|| out.map(|s| s.clone().expect("checked")))
    }

    /// Structure-preserving map.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let pair = |p: &Option<LoraPair<T>>, f: &mut dyn FnMut(&T) -> U| {
            p.as_ref().map(|p| LoraPair { a: f(&p.a), b: f(&p.b) })
        };
        Weights {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: f(&l.ln1_gain),
                    ln1_bias: f(&l.ln1_bias),
                    wq: f(&l.wq),
                    bq: f(&l.bq),
                    wk: f(&l.wk),
                    bk: f(&l.bk),
                    wv: f(&l.wv),
                    bv: f(&l.bv),
                    wo: f(&l.wo),
                    bo: f(&l.bo),
                    ln2_gain: f(&l.ln2_gain),
                    ln2_bias: f(&l.ln2_bias),
                    w1: f(&l.w1),
                    b1: f(&l.b1),
                    w2: f(&l.w2),
                    b2: f(&l.b2),
                    adapters: [
                        pair(&l.adapters[0], &mut f),
                        pair(&l.adapters[1], &mut f),
                        pair(&l.adapters[2], &mut f),
                        pair(&l.adapters[3], &mut f),
                    ],
                })
                .collect(),
            lnf_gain: f(&self.lnf_gain),
            lnf_bias: f(&self.lnf_bias),
            head: self.head.as_ref().map(|h| Head { w: f(&h.w), b: f(&h.b) }),
        }
    }
}

/// `amp * sin(p w_i)` in even columns and `amp * cos(p w_i)` in odd ones,
/// with `w_i = 10000^(-2i/d)` for column pair `i`.
pub fn sinusoids(len: usize, d: usize, amp: f64) -> Tensor {
    let mut values = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let angle = p as f64 * 10000f64.powf(-((2 * (j / 2)) as f64) / d as f64);
            values.push(amp * if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[len, d], values).expect("shape matches length")
}

/// A model: config, weights and (when adapted) its LoRA settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Param>,
    pub lora: Option<LoraConfig>,
}

impl ModelParams {
    /// Fresh weights. Token embeddings and the classifier head are
    /// `N(0, INIT_STD^2)`, so initial logits are near zero. Block matrices
    /// are `N(0, 1/fan_in)`, which keeps attention scores O(1) from the
    /// first step. Position embeddings start as sinusoids with per-entry RMS
    /// `INIT_STD` and are learned from there. Biases are zero, norm gains
    /// one. Draws come from the `"init"` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_for(seed, "init");
        let (d, f) = (config.d_model, config.d_ffn);
        let mut draw = |shape: &[usize], std: f64| Param::new(Tensor::randn(shape, std, &mut rng));
        let tok_emb = draw(&[config.vocab_size, d], INIT_STD);
        let pos_emb = Param::new(sinusoids(config.max_len, d, INIT_STD * std::f64::consts::SQRT_2));
        let mut randn = |shape: &[usize]| {
            let std = 1.0 / (shape[0] as f64).sqrt();
            draw(shape, std)
        };
        let zeros = |n: usize| Param::new(Tensor::zeros(&[n]));
        let ones = |n: usize| Param::new(Tensor::full(&[n], 1.0));
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                wq: randn(&[d, d]),
                bq: zeros(d),
                wk: randn(&[d, d]),
                bk: zeros(d),
                wv: randn(&[d, d]),
                bv: zeros(d),
                wo: randn(&[d, d]),
                bo: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                w1: randn(&[d, f]),
                b1: zeros(f),
                w2: randn(&[f, d]),
                b2: zeros(d),
                adapters: [None, None, None, None],
            });
        }
        let head = match config.arch {
            Arch::Encoder => Some(Head {
                w: draw(&[d, config.n_classes], INIT_STD),
                b: zeros(config.n_classes),
            }),
            Arch::Decoder => None,
        };
        Ok(Self {
            config,
            weights: Weights {
                tok_emb,
                pos_emb,
                layers,
                lnf_gain: ones(d),
                lnf_bias: zeros(d),
                head,
            },
            lora: None,
        })
    }

    /// Sum of element counts, optionally only over trainable tensors.
    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        let mut n = 0;
        self.weights.visit(Subset::All, |_, p| {
            if !trainable_only || p.trainable {
                n += p.value.numel();
            }
        });
        n
    }

    pub fn freeze_all(&mut self) {
        self.weights.visit_mut(Subset::All, |_, p| p.trainable = false);
    }

    pub fn has_adapters(&self) -> bool {
        let mut any = false;
        self.weights.visit(Subset::Adapters, |_, _| any = true);
        any
    }

    fn lora_scale(&self) -> f64 {
        self.lora.as_ref().map_or(1.0, LoraConfig::scale)
    }

    /// Places every tensor into `g` as a leaf (trainable ones get gradients).
    pub fn bind(&self, g: &mut Graph) -> Weights<Var> {
        self.weights.map(|p| g.param(p.value.clone(), p.trainable))
    }

    /// Gradients of the bound tensors, in canonical order, zeros for frozen.
    pub fn gradients(&self, g: &Graph, bound: &Weights<Var>) -> Vec<Tensor> {
        let mut out = Vec::new();
        bound.visit(Subset::All, |_, v| out.push(g.grad_tensor(*v)));
        out
    }

    pub fn check_arch(&self, expected: Arch) -> Result<(), ModelError> {
        if self.config.arch != expected {
            return Err(ModelError::WrongArch {
                expected,
                actual: self.config.arch,
            });
        }
        Ok(())
    }
}

/// A padded batch trimmed to its longest sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub size: usize,
    pub len: usize,
}

impl Batch {
    /// Trailing columns that are PAD in every row are dropped; masked
    /// positions never influence real ones, so outputs are unchanged.
    pub fn from_seqs(seqs: &[&TokenSeq], config: &ModelConfig) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let len = seqs.iter().map(|s| s.length).max().unwrap_or(0).max(1);
        if len > config.max_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max_len: config.max_len,
            });
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for p in 0..len {
                let id = s.ids.get(p).copied().unwrap_or(crate::tokenizer::PAD);
                if id as usize >= config.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        id,
                        vocab: config.vocab_size,
                    });
                }
                ids.push(id as usize);
                valid.push(s.attention_mask.get(p).copied().unwrap_or(0) == 1);
            }
        }
        Ok(Self {
            ids,
            valid,
            size: seqs.len(),
            len,
        })
    }

    /// Unpadded rows from raw ids (all positions valid).
    pub fn from_ids(rows: &[Vec<u32>], config: &ModelConfig) -> Result<Self, ModelError> {
        let seqs: Vec<TokenSeq> = rows
            .iter()
            .map(|r| TokenSeq {
                ids: r.clone(),
                attention_mask: vec![1; r.len()],
                length: r.len(),
            })
            .collect();
        let refs: Vec<&TokenSeq> = seqs.iter().collect();
        if rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(ModelError::Config("from_ids needs equal-length rows".into()));
        }
        Self::from_seqs(&refs, config)
    }
}

fn projection(
    g: &mut Graph,
    x: Var,
    layer: &LayerWeights<Var>,
    p: Projection,
    lora_scale: f64,
) -> Result<Var, TensorError> {
    let (w, b) = layer.projection(p);
    let xw = g.matmul(x, *w)?;
    let y = g.add_bias(xw, *b)?;
    match layer.adapter(p) {
        None => Ok(y),
        Some(pair) => {
            let down = g.matmul_nt(x, pair.a)?;
            let up = g.matmul_nt(down, pair.b)?;
            let scaled = g.scale(up, lora_scale);
            g.add(y, scaled)
        }
    }
}

/// Runs the shared trunk and returns the final-norm hidden states `[b*t, d]`.
pub fn trunk<R: Rng + ?Sized>(
    params: &ModelParams,
    g: &mut Graph,
    w: &Weights<Var>,
    batch: &Batch,
    causal: bool,
    mut dropout_rng: Option<&mut R>,
) -> Result<Var, ModelError> {
    let cfg = &params.config;
    let (b, t) = (batch.size, batch.len);
    if t > cfg.max_len {
        return Err(ModelError::SequenceTooLong {
            len: t,
            max_len: cfg.max_len,
        });
    }
    let p_drop = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };
    let mut drop = |g: &mut Graph, x: Var| match dropout_rng.as_deref_mut() {
        Some(rng) if p_drop > 0.0 => g.dropout(x, p_drop, rng),
        _ => x,
    };

    let positions: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let tok = g.embedding(w.tok_emb, &batch.ids)?;
    let pos = g.embedding(w.pos_emb, &positions)?;
    let mut x = g.add(tok, pos)?;
    x = drop(g, x);

    let mask = AttnMask {
        causal,
        key_valid: Some(batch.valid.clone()),
    };
    let scale = params.lora_scale();
    for layer in &w.layers {
        let h = g.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;
        let q = projection(g, h, layer, Projection::Wq, scale)?;
        let k = projection(g, h, layer, Projection::Wk, scale)?;
        let v = projection(g, h, layer, Projection::Wv, scale)?;
        let q = g.split_heads(q, b, cfg.n_heads)?;
        let k = g.split_heads(k, b, cfg.n_heads)?;
        let v = g.split_heads(v, b, cfg.n_heads)?;
        let a = g.attention(q, k, v, &mask)?;
        let a = g.merge_heads(a)?;
        let o = projection(g, a, layer, Projection::Wo, scale)?;
        let o = drop(g, o);
        x = g.add(x, o)?;

        let h = g.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
        let f = g.matmul(h, layer.w1)?;
        let f = g.add_bias(f, layer.b1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, layer.w2)?;
        let f = g.add_bias(f, layer.b2)?;
        let f = drop(g, f);
        x = g.add(x, f)?;
    }
    Ok(g.layer_norm(x, w.lnf_gain, w.lnf_bias, LN_EPS)?)
}

/// Classifier logits `[b, n_classes]` from the CLS (position 0) state.
pub fn encoder_logits<R: Rng + ?Sized>(
    params: &ModelParams,
    g: &mut Graph,
    w: &Weights<Var>,
    batch: &Batch,
    dropout_rng: Option<&mut R>,
) -> Result<Var, ModelError> {
    params.check_arch(Arch::Encoder)?;
    let h = trunk(params, g, w, batch, false, dropout_rng)?;
    let rows: Vec<usize> = (0..batch.size).map(|i| i * batch.len).collect();
    let cls = g.gather_rows(h, &rows)?;
    let head = w
        .head
        .as_ref()
        .ok_or_else(|| ModelError::Config("encoder without classification head".into()))?;
    let z = g.matmul(cls, head.w)?;
    Ok(g.add_bias(z, head.b)?)
}

/// LM logits `[b*t, vocab]` through the tied embedding.
pub fn decoder_logits<R: Rng + ?Sized>(
    params: &ModelParams,
    g: &mut Graph,
    w: &Weights<Var>,
    batch: &Batch,
    dropout_rng: Option<&mut R>,
) -> Result<Var, ModelError> {
    params.check_arch(Arch::Decoder)?;
    let h = trunk(params, g, w, batch, true, dropout_rng)?;
    Ok(g.matmul_nt(h, w.tok_emb)?)
}

type NoRng = rand_chacha::ChaCha20Rng;

/// Inference-mode classifier logits, shape `[b, n_classes]`.
pub fn encoder_forward(params: &ModelParams, seqs: &[&TokenSeq]) -> Result<Tensor, ModelError> {
    let batch = Batch::from_seqs(seqs, &params.config)?;
    let mut g = Graph::new();
    let w = params.weights.map(|p| g.constant(p.value.clone()));
    let logits = encoder_logits::<NoRng>(params, &mut g, &w, &batch, None)?;
    Ok(g.value(logits).clone())
}

/// Inference-mode LM logits, shape `[b, t, vocab]` with `t` the trimmed length.
pub fn decoder_forward(params: &ModelParams, seqs: &[&TokenSeq]) -> Result<Tensor, ModelError> {
    let batch = Batch::from_seqs(seqs, &params.config)?;
    decoder_forward_batch(params, &batch)
}

pub fn decoder_forward_batch(params: &ModelParams, batch: &Batch) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let w = params.weights.map(|p| g.constant(p.value.clone()));
    let logits = decoder_logits::<NoRng>(params, &mut g, &w, batch, None)?;
    let out = g.value(logits).clone();
    Ok(out.reshape(&[batch.size, batch.len, params.config.vocab_size])?)
}

/// Next-token targets for a causal batch: position `p` predicts `p + 1`
/// when that position is real. With `completion_from`, only targets at or
/// after that position (per row) count.
pub fn next_token_targets(batch: &Batch, completion_from: Option<&[usize]>) -> Vec<Option<usize>> {
    let (b, t) = (batch.size, batch.len);
    let mut targets = vec![None; b * t];
    for r in 0..b {
        for p in 0..t.saturating_sub(1) {
            let next = r * t + p + 1;
            if !batch.valid[next] {
                continue;
            }
            if let Some(starts) = completion_from {
                if p + 1 < starts[r] {
                    continue;
                }
            }
            targets[r * t + p] = Some(batch.ids[next]);
        }
    }
    targets
}
