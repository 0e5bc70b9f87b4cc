use rand::Rng as _;

use super::{declare_attention, rel_attention, AttnGeometry, Ctx, ModelConfig, ParamSpecs, Role};
use crate::error::{Error, Result};
use crate::tensor::{lit, Float, Var};

pub const LN_EPS: f64 = 1e-6;

pub fn declare_linear(specs: &mut ParamSpecs, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    specs.add(format!("{prefix}/w"), &[fan_in, fan_out], Role::Weight { fan_in });
    if bias {
        specs.add(format!("{prefix}/b"), &[fan_out], Role::Bias);
    }
}

pub fn declare_layernorm(specs: &mut ParamSpecs, prefix: &str, d: usize) {
    specs.add(format!("{prefix}/gain"), &[d], Role::Gain);
    specs.add(format!("{prefix}/bias"), &[d], Role::Bias);
}

pub fn declare_feed_forward(specs: &mut ParamSpecs, prefix: &str, cfg: &ModelConfig) {
    declare_linear(specs, &format!("{prefix}/fc1"), cfg.d_model, cfg.d_ff, true);
    declare_linear(specs, &format!("{prefix}/fc2"), cfg.d_ff, cfg.d_model, true);
}

/// Parameters of one pre-norm block (self-attention + feed-forward).
pub fn declare_block(specs: &mut ParamSpecs, prefix: &str, cfg: &ModelConfig) {
    declare_layernorm(specs, &format!("{prefix}/ln1"), cfg.d_model);
    declare_attention(specs, &format!("{prefix}/attn"), cfg);
    declare_layernorm(specs, &format!("{prefix}/ln2"), cfg.d_model);
    declare_feed_forward(specs, &format!("{prefix}/ff"), cfg);
}

/// `x·W (+ b)`; the bias is used when the registry has one.
pub fn linear<T: Float>(ctx: &Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let y = ctx.g.matmul(x, ctx.param(&format!("{prefix}/w"))?)?;
    let bias = format!("{prefix}/b");
    if ctx.params().contains(&bias) {
        ctx.g.add(y, ctx.param(&bias)?)
    } else {
        Ok(y)
    }
}

pub fn layernorm<T: Float>(ctx: &Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = ctx.param(&format!("{prefix}/gain"))?;
    let bias = ctx.param(&format!("{prefix}/bias"))?;
    ctx.g.layernorm(x, gain, bias, LN_EPS)
}

/// `Linear(d→d_ff) → FastGelu → Linear(d_ff→d)`.
pub fn feed_forward<T: Float>(ctx: &Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(ctx, x, &format!("{prefix}/fc1"))?;
    let h = ctx.g.gelu_fast(h);
    linear(ctx, h, &format!("{prefix}/fc2"))
}

/// Inverted dropout; identity outside training or at rate 0.
pub fn dropout<T: Float>(ctx: &Ctx<'_, T>, x: Var, rate: f64) -> Result<Var> {
    if !ctx.training() || rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
    }
    let n = ctx.g.value(x).numel();
    let keep: T = lit(1.0 / (1.0 - rate));
    let factor = ctx.with_rng(|rng| {
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect::<Vec<T>>()
    });
    match factor {
        Some(f) => ctx.g.mul_const(x, f),
        None => Ok(x),
    }
}

/// Token lookup scaled by `√d_model`; `tokens` is row-major `[batch, len]`.
pub fn embed<T: Float>(ctx: &Ctx<'_, T>, tokens: &[usize], batch: usize, len: usize) -> Result<Var> {
    if tokens.len() != batch * len {
        return Err(Error::Dimension(format!(
            "{} tokens for a [{batch}, {len}] batch",
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= ctx.cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token {t} outside vocabulary of {}",
            ctx.cfg.vocab_size
        )));
    }
    let rows = ctx.g.gather_rows(ctx.param("embed/table")?, tokens)?;
    let x = ctx.g.reshape(rows, &[batch, len, ctx.cfg.d_model])?;
    Ok(ctx.g.scale(x, (ctx.cfg.d_model as f64).sqrt()))
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))`, with dropout on
/// both sublayer outputs while training.
pub fn transformer_block<T: Float>(
    ctx: &Ctx<'_, T>,
    x: Var,
    prefix: &str,
    table: &str,
    geom: &AttnGeometry<T>,
) -> Result<Var> {
    let rate = ctx.cfg.dropout;
    let h = layernorm(ctx, x, &format!("{prefix}/ln1"))?;
    let a = rel_attention(ctx, &format!("{prefix}/attn"), h, h, table, geom)?;
    let x = ctx.g.add(x, dropout(ctx, a, rate)?)?;
    let h = layernorm(ctx, x, &format!("{prefix}/ln2"))?;
    let f = feed_forward(ctx, h, &format!("{prefix}/ff"))?;
    ctx.g.add(x, dropout(ctx, f, rate)?)
}
