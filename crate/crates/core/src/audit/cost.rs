//! Closed-form multiply-add counts.
//!
//! Counts are in FLOPs, two per multiply-add, the same unit the graph's
//! matmul counter uses. Per self-attention block at length `l` with `r`
//! relative offsets:
//!
//! - attention scores `2·l²·d`, attention-weighted sum `2·l²·d`,
//! - relative-position scores `2·l·r·d` plus the table projection `2·r·d²`,
//! - q/k/v/o projections `8·l·d²`, feed-forward `4·l·d·d_ff`.
//!
//! Resampling layers follow the same rules with their query and key
//! lengths. Element-wise work (norms, biases, softmax) is not counted.

use serde::Serialize;

use crate::model::{Hierarchy, Level};
use crate::nn::ModelConfig;
use crate::resample::{ShortenMethod, UpsampleMethod};

/// Multiply-add counts of one group of layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub scores: u64,
    pub rel_position: u64,
    pub weighted_sum: u64,
    pub projections: u64,
    pub feed_forward: u64,
    pub resampling: u64,
    pub output: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.scores
            + self.rel_position
            + self.weighted_sum
            + self.projections
            + self.feed_forward
            + self.resampling
            + self.output
    }

    fn add(&mut self, o: &OpCounts) {
        self.scores += o.scores;
        self.rel_position += o.rel_position;
        self.weighted_sum += o.weighted_sum;
        self.projections += o.projections;
        self.feed_forward += o.feed_forward;
        self.resampling += o.resampling;
        self.output += o.output;
    }

    fn times(mut self, n: u64) -> Self {
        self.scores *= n;
        self.rel_position *= n;
        self.weighted_sum *= n;
        self.projections *= n;
        self.feed_forward *= n;
        self.resampling *= n;
        self.output *= n;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    /// e.g. `l0/pre`, `l1/core`, `l0/shorten`.
    pub name: String,
    /// Sequence length the stage runs at.
    pub length: usize,
    pub layers: usize,
    pub ops: OpCounts,
    pub activation_words: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub hierarchy: String,
    pub seq_len: usize,
    pub stages: Vec<StageCost>,
}

impl CostEstimate {
    pub fn totals(&self) -> OpCounts {
        let mut t = OpCounts::default();
        for s in &self.stages {
            t.add(&s.ops);
        }
        t
    }

    pub fn total(&self) -> u64 {
        self.totals().total()
    }

    pub fn activation_words(&self) -> u64 {
        self.stages.iter().map(|s| s.activation_words).sum()
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Relative offsets needed by causal self-attention at length `l`.
fn self_rel(l: usize, window: Option<usize>) -> usize {
    window.map_or(l, |w| w.min(l))
}

/// One self-attention transformer block at length `l`.
pub fn block_cost(l: usize, cfg: &ModelConfig, window: Option<usize>) -> OpCounts {
    let (l, d, f) = (u(l), u(cfg.d_model), u(cfg.d_ff));
    let r = u(self_rel(l as usize, window));
    OpCounts {
        scores: 2 * l * l * d,
        rel_position: 2 * l * r * d + 2 * r * d * d,
        weighted_sum: 2 * l * l * d,
        projections: 8 * l * d * d,
        feed_forward: 4 * l * d * f,
        ..OpCounts::default()
    }
}

/// Cross-attention block with `q` queries over `kv` keys and `r` offsets.
fn cross_cost(q: usize, kv: usize, r: usize, cfg: &ModelConfig) -> OpCounts {
    let (q, kv, r, d, f) = (u(q), u(kv), u(r), u(cfg.d_model), u(cfg.d_ff));
    OpCounts {
        scores: 2 * q * kv * d,
        rel_position: 2 * q * r * d + 2 * r * d * d,
        weighted_sum: 2 * q * kv * d,
        projections: 4 * q * d * d + 4 * kv * d * d,
        feed_forward: 4 * q * d * f,
        ..OpCounts::default()
    }
}

fn block_words(l: usize, keys: usize, r: usize, cfg: &ModelConfig) -> u64 {
    let (l, keys, r, d, f, h) = (u(l), u(keys), u(r), u(cfg.d_model), u(cfg.d_ff), u(cfg.n_heads));
    // Content, gathered position and softmaxed scores, raw position
    // scores, the d-wide residual-stream tensors and the hidden layer.
    3 * h * l * keys + h * l * r + 12 * l * d + 2 * l * f
}

/// Shortening at full length `l` by `k`.
pub fn shorten_cost(method: ShortenMethod, l: usize, k: usize, cfg: &ModelConfig) -> (OpCounts, u64) {
    let d = u(cfg.d_model);
    let linear = 2 * u(l) * d * d;
    match method {
        ShortenMethod::AvgPool => (OpCounts::default(), u(l / k) * d),
        ShortenMethod::LinearPool => (
            OpCounts {
                resampling: linear,
                ..OpCounts::default()
            },
            u(l / k) * d,
        ),
        ShortenMethod::AttnPoolAvg | ShortenMethod::AttnPoolLinear => {
            let c = cross_cost(l / k, l, l, cfg);
            let base = if method == ShortenMethod::AttnPoolLinear { linear } else { 0 };
            (
                OpCounts {
                    resampling: c.total() + base,
                    ..OpCounts::default()
                },
                block_words(l / k, l, l, cfg),
            )
        }
    }
}

/// Upsampling from `l / k` back to `l`.
pub fn upsample_cost(method: UpsampleMethod, l: usize, k: usize, cfg: &ModelConfig) -> (OpCounts, u64) {
    let d = u(cfg.d_model);
    let linear = 2 * u(l) * d * d;
    let (ops, words) = match method {
        UpsampleMethod::Repeat => (0, u(l) * d),
        UpsampleMethod::Linear => (linear, u(l) * d),
        UpsampleMethod::AttnIdentityU | UpsampleMethod::AttnLinearU => {
            let c = cross_cost(l, l / k, l, cfg);
            let base = if method == UpsampleMethod::AttnLinearU { linear } else { 0 };
            (c.total() + base, block_words(l, l / k, l, cfg))
        }
    };
    (
        OpCounts {
            resampling: ops,
            ..OpCounts::default()
        },
        words,
    )
}

/// Cost of one forward pass over a single sequence of `seq_len` tokens.
/// Only full-resolution self-attention uses the local window.
pub fn estimate_cost(
    h: &Hierarchy,
    seq_len: usize,
    cfg: &ModelConfig,
    shorten: ShortenMethod,
    upsample: UpsampleMethod,
) -> CostEstimate {
    let mut stages = Vec::new();
    let mut level = h.root();
    let mut idx = 0;
    let mut l = seq_len;
    let stack = |name: String, layers: usize, l: usize, idx: usize| {
        let window = if idx == 0 { cfg.attention_window } else { None };
        StageCost {
            name,
            length: l,
            layers,
            ops: block_cost(l, cfg, window).times(u(layers)),
            activation_words: u(layers) * block_words(l, l, self_rel(l, window), cfg),
        }
    };
    let mut posts = Vec::new();
    loop {
        match level {
            Level::Leaf { layers } => {
                stages.push(stack(format!("l{idx}/core"), *layers, l, idx));
                break;
            }
            Level::Shortened {
                pre,
                factor,
                inner,
                post,
            } => {
                stages.push(stack(format!("l{idx}/pre"), *pre, l, idx));
                let (ops, activation_words) = shorten_cost(shorten, l, *factor, cfg);
                stages.push(StageCost {
                    name: format!("l{idx}/shorten"),
                    length: l / factor,
                    layers: 0,
                    ops,
                    activation_words,
                });
                let (ops, activation_words) = upsample_cost(upsample, l, *factor, cfg);
                posts.push(StageCost {
                    name: format!("l{idx}/upsample"),
                    length: l,
                    layers: 0,
                    ops,
                    activation_words,
                });
                posts.push(stack(format!("l{idx}/post"), *post, l, idx));
                l /= factor;
                level = inner;
                idx += 1;
            }
        }
    }
    // Upsampling runs innermost first on the way out.
    let mut tail: Vec<StageCost> = Vec::new();
    for pair in posts.chunks(2).rev() {
        tail.extend(pair.iter().cloned());
    }
    stages.extend(tail);
    let (d, v) = (u(cfg.d_model), u(cfg.vocab_size));
    stages.push(StageCost {
        name: "output".into(),
        length: seq_len,
        layers: 0,
        ops: OpCounts {
            output: 2 * u(seq_len) * d * v,
            ..OpCounts::default()
        },
        activation_words: u(seq_len) * (2 * d + v),
    });
    CostEstimate {
        hierarchy: h.to_string(),
        seq_len,
        stages,
    }
}
