//! Shortening and upsampling operators and the causality-preserving shift.
//!
//! Shorteners map `[B, L, d]` to `[B, L/k, d]`; upsamplers map back. No
//! implicit padding is ever applied: `L` must be divisible by `k`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{
    declare_attention, declare_feed_forward, declare_layernorm, declare_linear, dropout,
    feed_forward, layernorm, rel_attention, Ctx, GeometryKind, ModelConfig, ParamSpecs,
};
use crate::tensor::{Float, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShortenMethod {
    AvgPool,
    LinearPool,
    /// `S(x) + Attention(Q = S(x), K = V = x)` with `S` = average pooling.
    AttnPoolAvg,
    /// As above with `S` = linear pooling.
    AttnPoolLinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpsampleMethod {
    Repeat,
    Linear,
    /// Attention upsampling with `U(x, x') = x`.
    AttnIdentityU,
    /// Attention upsampling with `U(x, x') = x + LinearUpsampling(x')`.
    AttnLinearU,
}

impl ShortenMethod {
    pub const ALL: [ShortenMethod; 4] = [
        ShortenMethod::AvgPool,
        ShortenMethod::LinearPool,
        ShortenMethod::AttnPoolAvg,
        ShortenMethod::AttnPoolLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShortenMethod::AvgPool => "avg_pool",
            ShortenMethod::LinearPool => "linear_pool",
            ShortenMethod::AttnPoolAvg => "attn_pool_avg",
            ShortenMethod::AttnPoolLinear => "attn_pool_linear",
        }
    }

    /// True when the operator has no parameters that depend on the factor.
    pub fn factor_free(self) -> bool {
        matches!(self, ShortenMethod::AvgPool)
    }
}

impl UpsampleMethod {
    pub const ALL: [UpsampleMethod; 4] = [
        UpsampleMethod::Repeat,
        UpsampleMethod::Linear,
        UpsampleMethod::AttnIdentityU,
        UpsampleMethod::AttnLinearU,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpsampleMethod::Repeat => "repeat",
            UpsampleMethod::Linear => "linear",
            UpsampleMethod::AttnIdentityU => "attn_identityU",
            UpsampleMethod::AttnLinearU => "attn_linearU",
        }
    }

    pub fn factor_free(self) -> bool {
        matches!(self, UpsampleMethod::Repeat | UpsampleMethod::AttnIdentityU)
    }
}

impl fmt::Display for ShortenMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for UpsampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShortenMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShortenMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown shortening `{s}` (expected avg_pool, linear_pool, attn_pool_avg or attn_pool_linear)"
                ))
            })
    }
}

impl FromStr for UpsampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UpsampleMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown upsampling `{s}` (expected repeat, linear, attn_identityU or attn_linearU)"
                ))
            })
    }
}

/// A shortening operator together with its factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShortenSpec {
    pub method: ShortenMethod,
    pub factor: usize,
}

/// An upsampling operator together with its factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpsampleSpec {
    pub method: UpsampleMethod,
    pub factor: usize,
}

fn seq_len<T: Float>(g: &Graph<T>, x: Var) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [B, L, d], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

fn check_divisible(len: usize, k: usize) -> Result<()> {
    if k == 0 || !len.is_multiple_of(k) {
        return Err(Error::Usage(format!(
            "sequence length {len} is not divisible by shorten factor {k}"
        )));
    }
    Ok(())
}

/// Shifts `[B, L, d]` right by `s` positions along the sequence, zero-filling.
pub fn shift_right<T: Float>(g: &Graph<T>, x: Var, s: usize) -> Result<Var> {
    g.shift_right(x, 1, s)
}

/// Shifts a token sequence right by `s`, filling with `pad`.
pub fn shift_tokens(tokens: &[usize], s: usize, pad: usize) -> Result<Vec<usize>> {
    if s >= tokens.len() {
        return Err(Error::Usage(format!(
            "shift of {s} places on a sequence of length {}",
            tokens.len()
        )));
    }
    let mut out = vec![pad; s];
    out.extend_from_slice(&tokens[..tokens.len() - s]);
    Ok(out)
}

/// Mean over groups of `k` consecutive positions.
pub fn avg_pool<T: Float>(g: &Graph<T>, x: Var, k: usize) -> Result<Var> {
    let (b, l, d) = seq_len(g, x)?;
    check_divisible(l, k)?;
    let grouped = g.reshape(x, &[b, l / k, k, d])?;
    let summed = g.sum_axis(grouped, 2)?;
    Ok(g.scale(summed, 1.0 / k as f64))
}

/// Concatenates each group of `k` positions into `k·d` features and
/// projects them with `w: [k·d, d]`.
pub fn linear_pool<T: Float>(g: &Graph<T>, x: Var, k: usize, w: Var) -> Result<Var> {
    let (b, l, d) = seq_len(g, x)?;
    check_divisible(l, k)?;
    let grouped = g.reshape(x, &[b, l / k, k * d])?;
    g.matmul(grouped, w)
}

/// Position `p` of the output receives `x'[p / k]`.
pub fn repeat_upsample<T: Float>(g: &Graph<T>, x_short: Var, k: usize) -> Result<Var> {
    seq_len(g, x_short)?;
    g.repeat_interleave(x_short, 1, k)
}

/// Projects each shortened vector with `w: [d, k·d]` and unfolds the result
/// into `k` consecutive positions.
pub fn linear_upsample<T: Float>(g: &Graph<T>, x_short: Var, k: usize, w: Var) -> Result<Var> {
    let (b, l, d) = seq_len(g, x_short)?;
    let y = g.matmul(x_short, w)?;
    g.reshape(y, &[b, l * k, d])
}

pub fn declare_shorten(specs: &mut ParamSpecs, prefix: &str, method: ShortenMethod, k: usize, cfg: &ModelConfig) {
    let d = cfg.d_model;
    if matches!(method, ShortenMethod::LinearPool | ShortenMethod::AttnPoolLinear) {
        declare_linear(specs, &format!("{prefix}/linear"), k * d, d, false);
    }
    if matches!(method, ShortenMethod::AttnPoolAvg | ShortenMethod::AttnPoolLinear) {
        declare_cross_block(specs, prefix, cfg);
    }
}

pub fn declare_upsample(specs: &mut ParamSpecs, prefix: &str, method: UpsampleMethod, k: usize, cfg: &ModelConfig) {
    let d = cfg.d_model;
    if matches!(method, UpsampleMethod::Linear | UpsampleMethod::AttnLinearU) {
        declare_linear(specs, &format!("{prefix}/linear"), d, k * d, false);
    }
    if matches!(method, UpsampleMethod::AttnIdentityU | UpsampleMethod::AttnLinearU) {
        declare_cross_block(specs, prefix, cfg);
    }
}

fn declare_cross_block(specs: &mut ParamSpecs, prefix: &str, cfg: &ModelConfig) {
    declare_layernorm(specs, &format!("{prefix}/ln_q"), cfg.d_model);
    declare_layernorm(specs, &format!("{prefix}/ln_kv"), cfg.d_model);
    declare_attention(specs, &format!("{prefix}/attn"), cfg);
    declare_layernorm(specs, &format!("{prefix}/ln_ff"), cfg.d_model);
    declare_feed_forward(specs, &format!("{prefix}/ff"), cfg);
}

/// Pre-norm cross-attention block: `q + Attn(LN(q), LN(kv))`, then a
/// feed-forward residual.
fn cross_block<T: Float>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    q: Var,
    kv: Var,
    table: &str,
    kind: GeometryKind,
    len: usize,
    k: usize,
) -> Result<Var> {
    let g = ctx.g;
    let rate = ctx.cfg.dropout;
    let geom = ctx.geometry(kind, len, k);
    let qn = layernorm(ctx, q, &format!("{prefix}/ln_q"))?;
    let kvn = layernorm(ctx, kv, &format!("{prefix}/ln_kv"))?;
    let a = rel_attention(ctx, &format!("{prefix}/attn"), qn, kvn, table, &geom)?;
    let h = g.add(q, dropout(ctx, a, rate)?)?;
    let f = feed_forward(ctx, layernorm(ctx, h, &format!("{prefix}/ln_ff"))?, &format!("{prefix}/ff"))?;
    g.add(h, dropout(ctx, f, rate)?)
}

/// Attention pooling: `S(x) + CrossAttn(Q = S(x), K = V = x)` followed by a
/// feed-forward residual. Shortened query `g` attends full-resolution keys
/// `p` with `p / k <= g`.
pub fn attention_pool<T: Float>(
    ctx: &Ctx<'_, T>,
    x: Var,
    k: usize,
    base: ShortenMethod,
    prefix: &str,
    table: &str,
) -> Result<Var> {
    let (_, l, _) = seq_len(ctx.g, x)?;
    check_divisible(l, k)?;
    let s = match base {
        ShortenMethod::AvgPool => avg_pool(ctx.g, x, k)?,
        ShortenMethod::LinearPool => {
            linear_pool(ctx.g, x, k, ctx.param(&format!("{prefix}/linear/w"))?)?
        }
        other => {
            return Err(Error::Config(format!(
                "attention pooling needs a plain base shortener, got {other}"
            )))
        }
    };
    cross_block(ctx, prefix, s, x, table, GeometryKind::PoolCross, l, k)
}

/// Attention upsampling: `U(x, x') + CrossAttn(Q = U, K = V = x')` followed
/// by a feed-forward residual, where `x` are the activations from just
/// before shortening. Query `p` attends shortened keys `g <= p / k`.
pub fn attention_upsample<T: Float>(
    ctx: &Ctx<'_, T>,
    x: Var,
    x_short: Var,
    k: usize,
    linear_u: bool,
    prefix: &str,
    table: &str,
) -> Result<Var> {
    let g = ctx.g;
    let (b, l, d) = seq_len(g, x)?;
    let (bs, ls, ds) = seq_len(g, x_short)?;
    if b != bs || d != ds || l != ls * k {
        return Err(Error::Usage(format!(
            "cannot upsample [{bs}, {ls}, {ds}] by {k} onto [{b}, {l}, {d}]"
        )));
    }
    let u = if linear_u {
        let lin = linear_upsample(g, x_short, k, ctx.param(&format!("{prefix}/linear/w"))?)?;
        g.add(x, lin)?
    } else {
        x
    };
    cross_block(ctx, prefix, u, x_short, table, GeometryKind::UpsampleCross, l, k)
}

/// Applies `method` with factor `k`. `table` is the relative table of the
/// full-resolution level (used by attention pooling).
pub fn shorten<T: Float>(
    ctx: &Ctx<'_, T>,
    x: Var,
    method: ShortenMethod,
    k: usize,
    prefix: &str,
    table: &str,
) -> Result<Var> {
    match method {
        ShortenMethod::AvgPool => avg_pool(ctx.g, x, k),
        ShortenMethod::LinearPool => {
            linear_pool(ctx.g, x, k, ctx.param(&format!("{prefix}/linear/w"))?)
        }
        ShortenMethod::AttnPoolAvg => attention_pool(ctx, x, k, ShortenMethod::AvgPool, prefix, table),
        ShortenMethod::AttnPoolLinear => {
            attention_pool(ctx, x, k, ShortenMethod::LinearPool, prefix, table)
        }
    }
}

/// Brings `x_short` back to the resolution of `x` with `method`.
pub fn upsample<T: Float>(
    ctx: &Ctx<'_, T>,
    x: Var,
    x_short: Var,
    method: UpsampleMethod,
    k: usize,
    prefix: &str,
    table: &str,
) -> Result<Var> {
    let g = ctx.g;
    match method {
        UpsampleMethod::Repeat => repeat_upsample(g, x_short, k),
        UpsampleMethod::Linear => {
            linear_upsample(g, x_short, k, ctx.param(&format!("{prefix}/linear/w"))?)
        }
        UpsampleMethod::AttnIdentityU => attention_upsample(ctx, x, x_short, k, false, prefix, table),
        UpsampleMethod::AttnLinearU => attention_upsample(ctx, x, x_short, k, true, prefix, table),
    }
}
