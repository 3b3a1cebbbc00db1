//! Finite-difference checks for every graph primitive and for whole
//! one-layer blocks.

mod common;

use common::grad::{worst_error, CHECKS, TOLERANCE, TRIALS};

fn assert_check(name: &str) {
    let worst = worst_error(name);
    println!("{name:<16} worst relative error over {TRIALS} trials {worst:.3e}");
    assert!(worst <= TOLERANCE, "{name}: {worst:e}");
}

#[test]
fn every_check_is_registered_once() {
    let mut names = CHECKS.to_vec();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), CHECKS.len());
}

#[test]
fn matmul() {
    assert_check("matmul");
    assert_check("matmul_nt");
}

#[test]
fn elementwise() {
    for name in ["add", "add_bias", "scale", "gelu", "weighted_sum", "dropout"] {
        assert_check(name);
    }
}

#[test]
fn normalizers() {
    assert_check("layer_norm");
    assert_check("softmax");
    assert_check("cross_entropy");
}

#[test]
fn indexing_and_reshapes() {
    for name in ["embedding", "gather_rows", "split_heads", "merge_heads"] {
        assert_check(name);
    }
}

#[test]
fn attention_under_every_mask() {
    assert_check("attention");
}

#[test]
fn one_layer_encoder_block() {
    assert_check("encoder_block");
}

#[test]
fn one_layer_decoder_block() {
    assert_check("decoder_block");
}

#[test]
fn one_layer_adapted_block() {
    assert_check("adapted_block");
}
