use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate attaining `max_rel_err`.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the autodiff gradient of the scalar function `f` at `x` with
/// fourth-order central differences
/// `(f(x−2εeᵢ) − 8f(x−εeᵢ) + 8f(x+εeᵢ) − f(x+2εeᵢ)) / 12ε`,
/// whose O(ε⁴) truncation error allows a step large enough to keep
/// rounding noise far below the comparison tolerance.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// scalar. Two forward evaluations at `x` must agree bitwise, otherwise the
/// function is reported as non-deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Usage(format!("finite-difference step {eps} must be > 0")));
    }
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let leaf = g.leaf(t.clone(), false);
        let out = f(&g, leaf)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::Usage(format!(
                "finite_diff_check needs a scalar function, got {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    let g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&g, leaf)?;
    let base = g.value(out).item();
    if eval(x)?.to_bits() != base.to_bits() {
        return Err(Error::Audit(
            "function under check is not deterministic".into(),
        ));
    }
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .map(|t| t.to_f64_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            eval(&probe)
        };
        let (m2, m1, p1, p2) = (at(-2.0 * eps)?, at(-eps)?, at(eps)?, at(2.0 * eps)?);
        probe.data_mut()[i] = orig;
        numeric.push(((m2 - p2) + 8.0 * (p1 - m1)) / (12.0 * eps));
    }

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        analytic,
        numeric,
    };
    for (i, (&a, &n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-8);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let r = finite_diff_check(|g, v| Ok(g.sum_all(g.mul(v, v)?)), &x, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
        assert_eq!(r.analytic, vec![2.0, 4.0]);
    }

    #[test]
    fn constant_function_passes() {
        let x = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let z = g.scale(v, 0.0);
                Ok(g.sum_all(z))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                calls.set(calls.get() + 1);
                let s = g.scale(v, calls.get() as f64);
                Ok(g.sum_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Audit(_)));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(finite_diff_check(|g, v| Ok(g.sum_all(v)), &x, 0.0).is_err());
    }
}
