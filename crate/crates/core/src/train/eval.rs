use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Hourglass};
use crate::nn::Params;
use crate::tensor::{Float, Tensor};

/// Per-row negative log-likelihood (nats, computed in binary64) of
/// `targets` under `logits[.., V]`.
pub fn position_nats<T: Float>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<f64>> {
    let v = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("logits must have a class axis".into()))?;
    let rows = logits.numel() / v;
    if targets.len() != rows {
        return Err(Error::Dimension(format!("{} targets for {rows} rows", targets.len())));
    }
    logits
        .data()
        .chunks_exact(v)
        .zip(targets)
        .map(|(row, &t)| {
            if t >= v {
                return Err(Error::Index(format!("target {t} out of range for {v} classes")));
            }
            let mx = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x.as_f64() - mx).exp()).sum();
            Ok(z.ln() + mx - row[t].as_f64())
        })
        .collect()
}

/// One evaluation window: tokens `[start, start + len)`, of which
/// positions `[start + score_from, start + len)` are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalWindow {
    pub start: usize,
    pub len: usize,
    pub score_from: usize,
}

/// Window layout of overlapping evaluation over `n` positions.
///
/// The first window scores all of its positions; each following window
/// advances by `stride` and scores only its last `tail` positions. A final
/// window aligned to the end of the stream picks up any remainder, so every
/// position is scored exactly once.
pub fn plan_windows(n: usize, window: usize, stride: usize, tail: usize) -> Result<Vec<EvalWindow>> {
    if stride == 0 || stride != tail || tail > window {
        return Err(Error::Usage(format!(
            "overlapping evaluation needs 0 < stride == tail <= window, got window {window}, stride {stride}, tail {tail}"
        )));
    }
    let mut out = vec![EvalWindow {
        start: 0,
        len: window,
        score_from: 0,
    }];
    let mut end = window;
    while end + stride <= n {
        out.push(EvalWindow {
            start: end + stride - window,
            len: window,
            score_from: window - tail,
        });
        end += stride;
    }
    if end < n {
        out.push(EvalWindow {
            start: n - window,
            len: window,
            score_from: window - (n - end),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bpc: f64,
    /// Mean nats per scored position.
    pub nats: f64,
    pub positions: usize,
    pub windows: usize,
    /// How many times each stream position was scored.
    pub coverage: Vec<u32>,
}

/// Bits per byte of `stream` under overlapping-window evaluation. A stream
/// shorter than the window is evaluated in a single zero-padded pass.
#[allow(clippy::too_many_arguments)]
pub fn eval_overlapping<T: Float>(
    model: &Hourglass,
    params: &Params<T>,
    stream: &[u8],
    window: usize,
    stride: usize,
    tail: usize,
    batch: usize,
    opts: &ForwardOptions,
) -> Result<EvalReport> {
    let n = stream.len();
    if n == 0 {
        return Err(Error::Usage("cannot evaluate an empty stream".into()));
    }
    let div = match opts.shorten_factor {
        Some(k) if model.spec().sfd.enabled => k,
        _ => model.spec().hierarchy.total_factor(),
    };
    let plan = if n < window {
        let padded = n.div_ceil(div) * div;
        log::warn!(
            "stream of {n} bytes is shorter than the {window}-byte window; evaluating one padded pass of {padded}"
        );
        vec![EvalWindow {
            start: 0,
            len: padded,
            score_from: 0,
        }]
    } else {
        if !window.is_multiple_of(div) {
            return Err(Error::Usage(format!(
                "window {window} must be a multiple of {div}, the product of the hierarchy's shorten factors"
            )));
        }
        plan_windows(n, window, stride, tail)?
    };
    let mut coverage = vec![0u32; n];
    let mut total = 0.0;
    for group in plan.chunks(batch.max(1)) {
        let len = group[0].len;
        let mut tokens = Vec::with_capacity(group.len() * len);
        for w in group {
            tokens.extend((w.start..w.start + len).map(|p| stream.get(p).map_or(0, |&b| b as usize)));
        }
        let logits = model.logits(params, &tokens, group.len(), len, opts)?;
        let nats = position_nats(&logits, &tokens)?;
        for (b, w) in group.iter().enumerate() {
            for p in w.score_from..len {
                let pos = w.start + p;
                if pos < n {
                    coverage[pos] += 1;
                    total += nats[b * len + p];
                }
            }
        }
    }
    let positions = coverage.iter().filter(|&&c| c > 0).count();
    if coverage.iter().any(|&c| c != 1) {
        return Err(Error::Usage("evaluation windows do not tile the stream".into()));
    }
    let nats = total / positions as f64;
    Ok(EvalReport {
        bpc: super::bpc(nats),
        nats,
        positions,
        windows: plan.len(),
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(n: usize, w: &[EvalWindow]) -> Vec<u32> {
        let mut c = vec![0; n];
        for x in w {
            for p in x.start + x.score_from..x.start + x.len {
                c[p] += 1;
            }
        }
        c
    }

    #[test]
    fn windows_tile_every_position_once() {
        for (n, w, s) in [(100, 16, 4), (100, 16, 16), (97, 12, 5), (16, 16, 8), (33, 8, 8)] {
            let plan = plan_windows(n, w, s, s).unwrap();
            assert!(counts(n, &plan).iter().all(|&c| c == 1), "{n} {w} {s}");
            assert!(plan.iter().all(|x| x.start + x.len <= n));
        }
    }

    #[test]
    fn stride_must_equal_tail() {
        assert!(plan_windows(100, 16, 4, 8).is_err());
        assert!(plan_windows(100, 16, 0, 0).is_err());
    }
}
