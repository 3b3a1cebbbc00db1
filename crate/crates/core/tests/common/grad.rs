//! Finite-difference checks shared by the gradient and acceptance suites.
//! Every check runs [`TRIALS`] seeded trials and reports its worst relative
//! error.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use wifidiag::lora::{inject, LoraConfig};
use wifidiag::tensor::{grad_check, AttnMask, Graph, Tensor, TensorError, Var};
use wifidiag::tokenizer::TokenSeq;
use wifidiag::transformer::{
    decoder_logits, encoder_logits, next_token_targets, Arch, Batch, ModelParams, Projection, Subset, Weights,
};

use super::{randn, random_ids, rescaled, rng, seq, tiny};

pub const TRIALS: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Names accepted by [`worst_error`], primitives first.
pub const CHECKS: [&str; 19] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_bias",
    "scale",
    "gelu",
    "layer_norm",
    "softmax",
    "embedding",
    "gather_rows",
    "split_heads",
    "merge_heads",
    "attention",
    "cross_entropy",
    "weighted_sum",
    "dropout",
    "encoder_block",
    "decoder_block",
    "adapted_block",
];

/// Worst relative error of `op` scalarized by a random weighted sum.
fn check_op<F>(params: Vec<Tensor>, out_numel: usize, seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let weights = randn(&[out_numel], &mut rng(seed ^ 0xabcd)).into_values();
    let f = |g: &mut Graph, v: &[Var]| {
        let out = op(g, v)?;
        g.weighted_sum(out, &weights)
    };
    grad_check(f, &params, EPS).unwrap().max_rel_error
}

fn scaled(mut t: Tensor, k: f64) -> Tensor {
    t.values_mut().iter_mut().for_each(|v| *v *= k);
    t
}

fn masks() -> [AttnMask; 4] {
    [
        AttnMask::default(),
        AttnMask {
            causal: true,
            key_valid: None,
        },
        AttnMask {
            causal: false,
            key_valid: Some(vec![true, true, false, true, false, true, true, true]),
        },
        AttnMask {
            causal: true,
            key_valid: Some(vec![true, true, true, false, true, false, true, true]),
        },
    ]
}

fn trial(name: &str, s: u64) -> f64 {
    let mut r = rng(s);
    match name {
        "matmul" => {
            let p = vec![randn(&[3, 4], &mut r), randn(&[4, 5], &mut r)];
            check_op(p, 15, s, |g, v| g.matmul(v[0], v[1]))
        }
        "matmul_nt" => {
            let p = vec![randn(&[3, 4], &mut r), randn(&[5, 4], &mut r)];
            check_op(p, 15, s, |g, v| g.matmul_nt(v[0], v[1]))
        }
        "add" => {
            let p = vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)];
            check_op(p, 12, s, |g, v| g.add(v[0], v[1]))
        }
        "add_bias" => {
            let p = vec![randn(&[3, 4], &mut r), randn(&[4], &mut r)];
            check_op(p, 12, s, |g, v| g.add_bias(v[0], v[1]))
        }
        "scale" => check_op(vec![randn(&[3, 4], &mut r)], 12, s, |g, v| Ok(g.scale(v[0], -0.7))),
        // Past |x| ~ 5 the derivative falls below central-difference resolution.
        "gelu" => check_op(vec![scaled(randn(&[4, 5], &mut r), 1.5)], 20, s, |g, v| Ok(g.gelu(v[0]))),
        "layer_norm" => {
            let x = randn(&[3, 6], &mut r);
            let mut gain = scaled(randn(&[6], &mut r), 0.5);
            gain.values_mut().iter_mut().for_each(|v| *v += 1.0);
            let p = vec![x, gain, randn(&[6], &mut r)];
            check_op(p, 18, s, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }
        "softmax" => check_op(vec![scaled(randn(&[3, 5], &mut r), 3.0)], 15, s, |g, v| g.softmax(v[0])),
        "embedding" => check_op(vec![randn(&[7, 4], &mut r)], 20, s, |g, v| g.embedding(v[0], &[3, 0, 3, 6, 1])),
        "gather_rows" => check_op(vec![randn(&[5, 3], &mut r)], 9, s, |g, v| g.gather_rows(v[0], &[4, 0, 4])),
        "split_heads" => check_op(vec![randn(&[6, 4], &mut r)], 24, s, |g, v| g.split_heads(v[0], 2, 2)),
        "merge_heads" => check_op(vec![randn(&[2, 2, 3, 2], &mut r)], 24, s, |g, v| g.merge_heads(v[0])),
        "attention" => masks()
            .iter()
            .map(|mask| {
                let shape = [2, 2, 4, 3];
                let p = vec![randn(&shape, &mut r), randn(&shape, &mut r), randn(&shape, &mut r)];
                check_op(p, 48, s, |g, v| g.attention(v[0], v[1], v[2], mask))
            })
            .fold(0.0, f64::max),
        "cross_entropy" => {
            let targets = [Some(1), None, Some(4), Some(0)];
            check_op(vec![randn(&[4, 5], &mut r)], 1, s, |g, v| g.cross_entropy(v[0], &targets))
        }
        // every check ends in a weighted sum; this one feeds it a matrix directly
        "weighted_sum" => check_op(vec![randn(&[3, 7], &mut r)], 21, s, |_, v| Ok(v[0])),
        "dropout" => check_op(vec![randn(&[4, 6], &mut r)], 24, s, |g, v| {
            let mut mask_rng = ChaCha20Rng::seed_from_u64(s + 100);
            Ok(g.dropout(v[0], 0.3, &mut mask_rng))
        }),
        "encoder_block" => {
            let cfg = tiny(Arch::Encoder, 1);
            let p = rescaled(&ModelParams::init(cfg.clone(), s).unwrap(), s);
            model_check(&p, &block_rows(s, cfg.vocab_size, 8))
        }
        "decoder_block" => {
            let cfg = tiny(Arch::Decoder, 1);
            let p = rescaled(&ModelParams::init(cfg.clone(), s).unwrap(), s);
            model_check(&p, &block_rows(s, cfg.vocab_size, 8))
        }
        "adapted_block" => {
            let cfg = tiny(Arch::Encoder, 1);
            let base = ModelParams::init(cfg.clone(), s).unwrap();
            let lora = LoraConfig {
                rank: 2,
                alpha: 4.0,
                targets: vec![Projection::Wq, Projection::Wv, Projection::Wo],
                train_head: true,
            };
            // rescaling also makes B non-zero so gradients reach A
            let p = rescaled(&inject(&base, &lora, s).unwrap(), s);
            model_check(&p, &block_rows(s, cfg.vocab_size, 8))
        }
        other => panic!("unknown check {other}"),
    }
}

/// Worst relative error of the named check over all trials.
pub fn worst_error(name: &str) -> f64 {
    (0..TRIALS).map(|s| trial(name, s)).fold(0.0, f64::max)
}

fn block_rows(s: u64, vocab: usize, pad_to: usize) -> Vec<TokenSeq> {
    let mut r = rng(s + 1000);
    vec![
        seq(&random_ids(&mut r, pad_to, vocab), pad_to),
        seq(&random_ids(&mut r, pad_to - 3, vocab), pad_to),
    ]
}

/// Loss of a whole model against central differences in every tensor but
/// the key biases. Their gradient is identically zero, because a key bias
/// adds the same constant to a whole row of scores and softmax ignores it;
/// that is asserted on its own.
fn model_check(p: &ModelParams, rows: &[TokenSeq]) -> f64 {
    let batch = Batch::from_seqs(&rows.iter().collect::<Vec<_>>(), &p.config).unwrap();
    let arch = p.config.arch;
    let targets = match arch {
        Arch::Encoder => (0..rows.len()).map(|i| Some(i % 4)).collect(),
        Arch::Decoder => next_token_targets(&batch, None),
    };
    let forward = |g: &mut Graph, w: &Weights<Var>| match arch {
        Arch::Encoder => encoder_logits::<ChaCha20Rng>(p, g, w, &batch, None),
        Arch::Decoder => decoder_logits::<ChaCha20Rng>(p, g, w, &batch, None),
    };

    let mut names = Vec::new();
    let mut flat = Vec::new();
    p.weights.visit(Subset::All, |n, t| {
        names.push(n.to_string());
        flat.push(t.value.clone());
    });
    let checked: Vec<usize> = (0..names.len()).filter(|&i| !names[i].ends_with(".bk")).collect();
    let loss = |g: &mut Graph, vars: &[Var]| {
        let all: Vec<Var> = (0..flat.len())
            .map(|i| match checked.iter().position(|&c| c == i) {
                Some(k) => vars[k],
                None => g.constant(flat[i].clone()),
            })
            .collect();
        let w = p.weights.with_values(&all).expect("arity");
        let logits = forward(g, &w).map_err(|e| TensorError::Invalid(e.to_string()))?;
        g.cross_entropy(logits, &targets)
    };
    let params: Vec<Tensor> = checked.iter().map(|&i| flat[i].clone()).collect();
    let check = grad_check(loss, &params, EPS).unwrap();

    let mut g = Graph::new();
    let w = p.bind(&mut g);
    let logits = forward(&mut g, &w).unwrap();
    let l = g.cross_entropy(logits, &targets).unwrap();
    g.backward(l).unwrap();
    // A frozen key bias has no gradient slot at all.
    for bk in w.layers.iter().filter_map(|layer| g.grad(layer.bk)) {
        assert!(bk.iter().all(|x| x.abs() < 1e-12), "key-bias gradient {bk:?}");
    }
    check.max_rel_error
}
