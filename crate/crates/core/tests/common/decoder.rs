//! A directly assembled decoder-only Transformer over the same parameter
//! paths a flat hierarchy uses.

use hourglass::nn::{
    declare_block, declare_layernorm, declare_linear, embed, layernorm, linear, transformer_block,
    AttnGeometry, Ctx, GeometryKind, ModelConfig, ParamSpecs, Params, Role,
};
use hourglass::resample::shift_right;
use hourglass::tensor::{Float, Graph, Tensor};

pub fn cfg(window: Option<usize>) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        d_ff: 32,
        n_heads: 2,
        dropout: 0.0,
        attention_window: window,
        max_len: 16,
    }
}

pub fn decoder_specs(cfg: &ModelConfig, layers: usize) -> ParamSpecs {
    let mut specs = ParamSpecs::new();
    specs.add("embed/table", &[cfg.vocab_size, cfg.d_model], Role::Embedding);
    specs.add("l0/rel", &[cfg.max_len, cfg.d_model], Role::RelTable);
    for j in 0..layers {
        declare_block(&mut specs, &format!("l0/core/{j}"), cfg);
    }
    declare_layernorm(&mut specs, "final_norm", cfg.d_model);
    declare_linear(&mut specs, "out", cfg.d_model, cfg.vocab_size, true);
    specs
}

/// Embedding, shift, `layers` causal blocks, final norm and projection.
pub fn decoder_logits<T: Float>(cfg: &ModelConfig, params: &Params<T>, tokens: &[usize], batch: usize, len: usize, layers: usize) -> Tensor<T> {
    let g = Graph::new();
    let ctx = Ctx::eval(&g, cfg, params);
    let kind = if cfg.attention_window.is_some() { GeometryKind::LocalSelf } else { GeometryKind::CausalSelf };
    let geom = AttnGeometry::new(kind, len, 1, cfg.attention_window);
    let mut x = shift_right(&g, embed(&ctx, tokens, batch, len).unwrap(), 1).unwrap();
    for j in 0..layers {
        x = transformer_block(&ctx, x, &format!("l0/core/{j}"), "l0/rel", &geom).unwrap();
    }
    let x = layernorm(&ctx, x, "final_norm").unwrap();
    (*g.value(linear(&ctx, x, "out").unwrap())).clone()
}
