//! Helpers shared by the integration suites.
#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use wifidiag::tensor::Tensor;
use wifidiag::tokenizer::{TokenSeq, PAD};
use wifidiag::transformer::{Arch, ModelConfig, ModelParams, Subset};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub fn tiny(arch: Arch, n_layers: usize) -> ModelConfig {
    ModelConfig {
        arch,
        vocab_size: 13,
        d_model: 8,
        n_heads: 2,
        n_layers,
        d_ffn: 12,
        max_len: 10,
        n_classes: 4,
        dropout: 0.0,
    }
}

/// Replaces every tensor with O(1) values so gradients are far above the
/// finite-difference noise floor; gains stay centred on one.
pub fn rescaled(p: &ModelParams, seed: u64) -> ModelParams {
    let mut q = p.clone();
    let mut rng = rng(seed);
    q.weights.visit_mut(Subset::All, |name, t| {
        let fresh = Tensor::randn(t.value.shape(), 0.4, &mut rng);
        let gain = name.ends_with("gain");
        for (v, r) in t.value.values_mut().iter_mut().zip(fresh.values()) {
            *v = if gain { 1.0 + r } else { *r };
        }
    });
    q
}

pub fn seq(ids: &[u32], pad_to: usize) -> TokenSeq {
    let mut v = ids.to_vec();
    let mut mask = vec![1u8; ids.len()];
    v.resize(pad_to, PAD);
    mask.resize(pad_to, 0);
    TokenSeq {
        ids: v,
        attention_mask: mask,
        length: ids.len(),
    }
}

/// Ids drawn above the special-token range.
pub fn random_ids(rng: &mut ChaCha20Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(5..vocab as u32)).collect()
}
