mod common;

use common::gradients::*;

fn check(checks: Vec<Check>) {
    assert!(!checks.is_empty());
    for c in checks.iter().filter(|c| c.name.ends_with(" input")) {
        assert!(!c.vanished, "{}: gradient vanished", c.name);
    }
    assert_all(&checks);
}

#[test]
fn rel_attention_gradients() {
    check(rel_attention_checks());
}

#[test]
fn transformer_block_gradients() {
    check(transformer_block_checks());
}

#[test]
fn shortener_gradients() {
    check(shortener_checks());
}

#[test]
fn upsampler_gradients() {
    check(upsampler_checks());
}

#[test]
fn full_model_loss_gradients() {
    check(full_model_checks());
}
