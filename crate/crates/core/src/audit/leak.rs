//! Jacobian-based check of the autoregressive property.

use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Hierarchy, Hourglass, ModelSpec, SfdSpec};
use crate::nn::{embed, Ctx, InitScheme, ModelConfig, Params};
use crate::resample::{ShortenMethod, UpsampleMethod};
use crate::tensor::{Graph, Tensor};
use crate::Rng;

pub const AUDIT_TOLERANCE: f64 = 1e-12;

/// Dependence of output position `output` on input position `input`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Offender {
    pub output: usize,
    pub input: usize,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub fingerprint: String,
    pub len: usize,
    pub tolerance: f64,
    /// Row-major `[len, len]`: `max |∂logits[p, ·] / ∂embedding[j, ·]|`.
    pub matrix: Vec<f64>,
    pub pass: bool,
    /// Largest entry with `j >= p`.
    pub worst: Option<Offender>,
    /// Entries with `j >= p` above the tolerance, largest first (capped).
    pub offenders: Vec<Offender>,
}

impl AuditReport {
    pub fn entry(&self, p: usize, j: usize) -> f64 {
        self.matrix[p * self.len + j]
    }

    pub fn csv_header() -> &'static str {
        "fingerprint,len,pass,worst_output,worst_input,worst_magnitude"
    }

    pub fn csv_line(&self) -> String {
        let (o, i, m) = self
            .worst
            .map_or((String::new(), String::new(), String::new()), |w| {
                (w.output.to_string(), w.input.to_string(), format!("{:e}", w.magnitude))
            });
        format!("\"{}\",{},{},{o},{i},{m}", self.fingerprint, self.len, self.pass)
    }

    /// One JSON object without the full matrix.
    pub fn json_line(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            fingerprint: &'a str,
            len: usize,
            tolerance: f64,
            pass: bool,
            worst: Option<Offender>,
            offenders: &'a [Offender],
        }
        serde_json::to_string(&Summary {
            fingerprint: &self.fingerprint,
            len: self.len,
            tolerance: self.tolerance,
            pass: self.pass,
            worst: self.worst,
            offenders: &self.offenders,
        })
        .expect("summary serialises")
    }
}

const MAX_OFFENDERS: usize = 32;

/// Computes every entry `∂logits[p] / ∂embedding[j]` exactly, one reverse
/// pass per output coordinate, on a single random sequence of `len` tokens.
/// The derivative is taken with respect to the token embeddings before the
/// model's internal shift. Passes when every entry with `j >= p` is at most
/// `tolerance`.
pub fn leak_audit(
    model: &Hourglass,
    params: &Params<f64>,
    len: usize,
    tolerance: f64,
    opts: &ForwardOptions,
    token_seed: u64,
    fingerprint: impl Into<String>,
) -> Result<AuditReport> {
    let cfg = model.cfg();
    let d = cfg.d_model;
    let vocab = cfg.vocab_size;
    let mut rng = Rng::seed_from_u64(token_seed);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();

    let g = Graph::<f64>::new();
    let ctx = Ctx::eval(&g, cfg, params);
    let emb = embed(&ctx, &tokens, 1, len)?;
    let leaf = g.leaf((*g.value(emb)).clone(), true);
    let logits = model.forward_embedded(&ctx, leaf, opts)?;
    if !g.value(logits).all_finite() {
        return Err(Error::Audit("non-finite logits".into()));
    }

    let mut matrix = vec![0.0f64; len * len];
    let mut seed = Tensor::<f64>::zeros(&[1, len, vocab]);
    for p in 0..len {
        for v in 0..vocab {
            seed.data_mut()[p * vocab + v] = 1.0;
            g.backward_with(logits, &seed)?;
            seed.data_mut()[p * vocab + v] = 0.0;
            let grad = g
                .grad(leaf)
                .ok_or_else(|| Error::Audit("input embedding received no gradient".into()))?;
            for (j, row) in grad.data().chunks_exact(d).enumerate() {
                let m = row.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                if !m.is_finite() {
                    return Err(Error::Audit(format!("non-finite jacobian entry at ({p}, {j})")));
                }
                let e = &mut matrix[p * len + j];
                *e = e.max(m);
            }
        }
    }

    let mut leaks: Vec<Offender> = (0..len)
        .flat_map(|p| (p..len).map(move |j| (p, j)))
        .map(|(p, j)| Offender {
            output: p,
            input: j,
            magnitude: matrix[p * len + j],
        })
        .collect();
    leaks.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
    let worst = leaks.first().copied();
    let offenders: Vec<Offender> = leaks
        .into_iter()
        .filter(|o| o.magnitude > tolerance)
        .take(MAX_OFFENDERS)
        .collect();
    Ok(AuditReport {
        fingerprint: fingerprint.into(),
        len,
        tolerance,
        matrix,
        pass: offenders.is_empty(),
        worst,
        offenders,
    })
}

/// One configuration of the audit grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditCell {
    pub hierarchy: Hierarchy,
    pub shorten: ShortenMethod,
    pub upsample: UpsampleMethod,
    pub len: usize,
    pub seed: u64,
    /// Replaces the `k − 1` shift before every shortening.
    pub sabotage_shift: Option<usize>,
}

impl AuditCell {
    pub fn fingerprint(&self) -> String {
        let mut s = format!(
            "hierarchy={};shorten={};upsample={};len={};seed={}",
            self.hierarchy, self.shorten, self.upsample, self.len, self.seed
        );
        if let Some(shift) = self.sabotage_shift {
            s.push_str(&format!(";shift={shift}"));
        }
        s
    }
}

/// Tiny binary64 dimensions used by the audit.
pub fn audit_model_config(len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 16,
        d_ff: 32,
        n_heads: 2,
        dropout: 0.0,
        attention_window: None,
        max_len: len,
    }
}

/// Builds the cell's model with random O(1) parameters and audits it.
pub fn audit_cell(cell: &AuditCell, tolerance: f64) -> Result<AuditReport> {
    let cfg = ModelConfig {
        max_len: cell.len,
        ..audit_model_config(cell.len)
    };
    let model = Hourglass::new(ModelSpec {
        cfg,
        hierarchy: cell.hierarchy.clone(),
        shorten: cell.shorten,
        upsample: cell.upsample,
        sfd: SfdSpec::disabled(),
    })?;
    let params = model.init_params::<f64>(cell.seed, InitScheme::Audit)?;
    let opts = ForwardOptions {
        pre_shorten_shift: cell.sabotage_shift,
        ..ForwardOptions::default()
    };
    leak_audit(&model, &params, cell.len, tolerance, &opts, cell.seed ^ 0xA5A5, cell.fingerprint())
}

/// `1@1 1@k 1@1` for depth 1, `1@1 1@k 1@k² 1@k 1@1` for depth 2, …
pub fn grid_hierarchy(k: usize, depth: usize) -> Hierarchy {
    let mut up: Vec<String> = (0..=depth).map(|i| format!("1@{}", k.pow(i as u32))).collect();
    let down: Vec<String> = up.iter().rev().skip(1).cloned().collect();
    up.extend(down);
    Hierarchy::parse(&up.join(" ")).expect("grid hierarchies are valid")
}

/// Longest length up to `max_len` divisible by the hierarchy's factor.
pub fn grid_len(h: &Hierarchy, max_len: usize) -> usize {
    let f = h.total_factor();
    max_len / f * f
}

/// Every shortener × upsampler × factor × depth × seed combination.
pub fn audit_grid(factors: &[usize], depths: &[usize], seeds: &[u64], max_len: usize, sabotage_shift: Option<usize>) -> Vec<AuditCell> {
    let mut cells = Vec::new();
    for &k in factors {
        for &depth in depths {
            let hierarchy = grid_hierarchy(k, depth);
            let len = grid_len(&hierarchy, max_len);
            for shorten in ShortenMethod::ALL {
                for upsample in UpsampleMethod::ALL {
                    for &seed in seeds {
                        cells.push(AuditCell {
                            hierarchy: hierarchy.clone(),
                            shorten,
                            upsample,
                            len,
                            seed,
                            sabotage_shift,
                        });
                    }
                }
            }
        }
    }
    cells
}
