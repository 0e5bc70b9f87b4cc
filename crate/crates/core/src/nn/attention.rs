use std::rc::Rc;

use super::{Ctx, ParamSpecs, Role};
use crate::error::{Error, Result};
use crate::tensor::{lit, Float, Tensor, Var, MASK_VALUE};
use crate::nn::ModelConfig;

/// Which query/key layout an attention mask describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeometryKind {
    /// Causal self-attention, key `j` visible to query `i` iff `j <= i`.
    CausalSelf,
    /// Causal self-attention restricted to the configured local window.
    LocalSelf,
    /// Shortened queries over full-resolution keys: query group `g` sees
    /// key `p` iff `p / k <= g`.
    PoolCross,
    /// Full-resolution queries over shortened keys: query `p` sees group
    /// `g` iff `g <= p / k`.
    UpsampleCross,
}

/// Additive mask and relative-offset table for one attention layout.
///
/// Offsets are measured in units of the finer of the two resolutions and
/// index rows of the level's relative table. Masked pairs carry offset 0.
#[derive(Clone, Debug)]
pub struct AttnGeometry<T> {
    pub kind: GeometryKind,
    pub queries: usize,
    pub keys: usize,
    /// Number of relative-table rows the offsets reach.
    pub n_rel: usize,
    pub mask: Tensor<T>,
    pub offsets: Rc<Vec<usize>>,
}

impl<T: Float> AttnGeometry<T> {
    /// `len` is the full-resolution length; `k` the shorten factor for the
    /// cross layouts (ignored for self-attention).
    pub fn new(kind: GeometryKind, len: usize, k: usize, window: Option<usize>) -> Self {
        let (queries, keys) = match kind {
            GeometryKind::CausalSelf | GeometryKind::LocalSelf => (len, len),
            GeometryKind::PoolCross => (len / k, len),
            GeometryKind::UpsampleCross => (len, len / k),
        };
        let mut mask = vec![lit::<T>(MASK_VALUE); queries * keys];
        let mut offsets = vec![0usize; queries * keys];
        let mut n_rel = 1;
        for q in 0..queries {
            for c in 0..keys {
                let rel = match kind {
                    GeometryKind::CausalSelf => (c <= q).then(|| q - c),
                    GeometryKind::LocalSelf => {
                        let w = window.unwrap_or(usize::MAX);
                        (c <= q && q - c < w).then(|| q - c)
                    }
                    GeometryKind::PoolCross => (c / k <= q).then(|| q * k + k - 1 - c),
                    GeometryKind::UpsampleCross => (c <= q / k).then(|| q - c * k),
                };
                if let Some(r) = rel {
                    mask[q * keys + c] = T::zero();
                    offsets[q * keys + c] = r;
                    n_rel = n_rel.max(r + 1);
                }
            }
        }
        AttnGeometry {
            kind,
            queries,
            keys,
            n_rel,
            mask: Tensor::new(&[queries, keys], mask).expect("mask shape"),
            offsets: Rc::new(offsets),
        }
    }

    pub fn allowed(&self, q: usize, c: usize) -> bool {
        self.mask.data()[q * self.keys + c] == T::zero()
    }
}

pub fn declare_attention(specs: &mut ParamSpecs, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for name in ["q", "k", "v", "r", "o"] {
        specs.add(format!("{prefix}/{name}"), &[d, d], Role::Weight { fan_in: d });
    }
    let hd = cfg.head_dim();
    specs.add(format!("{prefix}/content_bias"), &[cfg.n_heads, hd], Role::AttnBias);
    specs.add(format!("{prefix}/pos_bias"), &[cfg.n_heads, hd], Role::AttnBias);
}

/// Multi-head attention with the Transformer-XL relative parametrisation:
/// `score(i, j) = (q_i + u)·k_j + (q_i + v)·r_{off(i,j)}`, scaled by
/// `1/√head_dim`, masked, softmaxed, applied to values and projected.
///
/// `queries` is `[B, Lq, d]`, `keys` is `[B, Lk, d]`; `table` names the
/// level's `[rows, d]` relative embedding table.
pub fn rel_attention<T: Float>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    queries: Var,
    keys: Var,
    table: &str,
    geom: &AttnGeometry<T>,
) -> Result<Var> {
    rel_attention_with_weights(ctx, prefix, queries, keys, table, geom).map(|(out, _)| out)
}

/// [`rel_attention`] that also returns the `[B, H, Lq, Lk]` attention weights.
pub fn rel_attention_with_weights<T: Float>(
    ctx: &Ctx<'_, T>,
    prefix: &str,
    queries: Var,
    keys: Var,
    table: &str,
    geom: &AttnGeometry<T>,
) -> Result<(Var, Var)> {
    let g = ctx.g;
    let cfg = ctx.cfg;
    let (d, heads, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let (qs, ks) = (g.shape(queries), g.shape(keys));
    if qs.len() != 3 || ks.len() != 3 || qs[1] != geom.queries || ks[1] != geom.keys {
        return Err(Error::Dimension(format!(
            "attention inputs {qs:?}/{ks:?} do not match a {}×{} layout",
            geom.queries, geom.keys
        )));
    }
    let table_v = ctx.param(table)?;
    let rows = g.shape(table_v)[0];
    if geom.n_rel > rows {
        return Err(Error::Config(format!(
            "relative table `{table}` covers {rows} offsets but {} are needed",
            geom.n_rel
        )));
    }
    let p = |name: &str| ctx.param(&format!("{prefix}/{name}"));

    let q_lin = g.matmul(queries, p("q")?)?;
    let u = g.reshape(p("content_bias")?, &[d])?;
    let v_bias = g.reshape(p("pos_bias")?, &[d])?;
    let qu = g.split_heads(g.add(q_lin, u)?, heads)?;
    let qv = g.split_heads(g.add(q_lin, v_bias)?, heads)?;
    let k = g.split_heads(g.matmul(keys, p("k")?)?, heads)?;
    let v = g.split_heads(g.matmul(keys, p("v")?)?, heads)?;

    let idx: Vec<usize> = (0..geom.n_rel).collect();
    let r = g.matmul(g.gather_rows(table_v, &idx)?, p("r")?)?;
    let r = g.permute(g.reshape(r, &[geom.n_rel, heads, hd])?, &[1, 0, 2])?;

    let content = g.bmm(qu, k, false, true)?;
    let position = g.bmm(qv, r, false, true)?;
    let position = g.gather_last(position, Rc::clone(&geom.offsets), geom.keys)?;
    let scores = g.scale(g.add(content, position)?, 1.0 / (hd as f64).sqrt());
    let weights = g.softmax(scores, Some(&geom.mask))?;
    let mixed = g.merge_heads(g.bmm(weights, v, false, false)?)?;
    Ok((g.matmul(mixed, p("o")?)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_geometry() {
        let geo = AttnGeometry::<f64>::new(GeometryKind::CausalSelf, 4, 1, None);
        assert!(geo.allowed(2, 2) && geo.allowed(2, 0) && !geo.allowed(1, 2));
        assert_eq!(geo.offsets[3 * 4], 3);
        assert_eq!(geo.n_rel, 4);
    }

    #[test]
    fn local_geometry_limits_span() {
        let geo = AttnGeometry::<f64>::new(GeometryKind::LocalSelf, 6, 1, Some(2));
        assert!(geo.allowed(5, 4) && !geo.allowed(5, 3));
        assert_eq!(geo.n_rel, 2);
    }

    #[test]
    fn pool_cross_is_block_causal() {
        let k = 3;
        let geo = AttnGeometry::<f64>::new(GeometryKind::PoolCross, 9, k, None);
        assert_eq!((geo.queries, geo.keys), (3, 9));
        for gq in 0..3 {
            for p in 0..9 {
                assert_eq!(geo.allowed(gq, p), p / k <= gq);
            }
        }
        assert_eq!(geo.n_rel, 9);
    }

    #[test]
    fn upsample_cross_is_block_causal() {
        let k = 2;
        let geo = AttnGeometry::<f64>::new(GeometryKind::UpsampleCross, 6, k, None);
        assert_eq!((geo.queries, geo.keys), (6, 3));
        for p in 0..6 {
            for gk in 0..3 {
                assert_eq!(geo.allowed(p, gk), gk <= p / k);
                if geo.allowed(p, gk) {
                    assert_eq!(geo.offsets[p * 3 + gk], p - gk * k);
                }
            }
        }
    }
}
