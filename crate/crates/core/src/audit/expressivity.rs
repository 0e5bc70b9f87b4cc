//! Repeats-task experiment: how well a shortened model predicts tokens
//! that are only copies of a token inside the current group.

use serde::Serialize;

use crate::data::{gen_repeats, PositionClass, RepeatsTask};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Hierarchy, Hourglass, ModelSpec, SfdSpec};
use crate::nn::ModelConfig;
use crate::resample::{ShortenMethod, UpsampleMethod};
use crate::train::{AdamConfig, Schedule, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpressivityConfig {
    pub task: RepeatsTask,
    pub k: usize,
    pub with_vanilla: bool,
    /// Layers in the shortened stack.
    pub shortened_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub batch: usize,
    pub max_steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub eval_every: u64,
    pub eval_sequences: usize,
    /// Stop once chunk-end accuracy exceeds this.
    pub stop_at: Option<f64>,
    /// Stop after this many steps without shortening the schedule.
    pub stop_after: Option<u64>,
    pub seed: u64,
}

impl Default for ExpressivityConfig {
    fn default() -> Self {
        ExpressivityConfig {
            task: RepeatsTask {
                alphabet: 4,
                length: 384,
            },
            k: 3,
            with_vanilla: true,
            shortened_layers: 4,
            d_model: 32,
            d_ff: 64,
            n_heads: 2,
            batch: 4,
            max_steps: 5000,
            lr: 3e-3,
            warmup: 50,
            eval_every: 50,
            eval_sequences: 8,
            stop_at: None,
            stop_after: None,
            seed: 0,
        }
    }
}

impl ExpressivityConfig {
    pub fn hierarchy(&self) -> Result<Hierarchy> {
        let v = usize::from(self.with_vanilla);
        Hierarchy::parse(&format!("{v}@1 {}@{} {v}@1", self.shortened_layers, self.k))
    }
}

/// Per-class argmax accuracy at one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub step: u64,
    pub chunk_start: f64,
    pub separator: f64,
    pub chunk_end: f64,
    /// Positions whose 1-based index is a multiple of `k`, i.e. the last
    /// position of every shortening group.
    pub group_end: f64,
}

impl ClassAccuracy {
    pub const CSV_HEADER: &'static str = "step,chunk_start,separator,chunk_end,group_end";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.4}",
            self.step, self.chunk_start, self.separator, self.chunk_end, self.group_end
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpressivityResult {
    pub history: Vec<ClassAccuracy>,
    pub steps: u64,
    /// Set when training diverged; `history` holds what was measured.
    pub failure: Option<String>,
}

impl ExpressivityResult {
    pub fn last(&self) -> ClassAccuracy {
        self.history.last().copied().unwrap_or_default()
    }
}

fn accuracy(trainer: &Trainer<f32>, task: &RepeatsTask, seqs: &[Vec<usize>], k: usize, step: u64) -> Result<ClassAccuracy> {
    let len = task.length;
    let tokens: Vec<usize> = seqs.concat();
    let logits = trainer
        .model()
        .logits(&trainer.state.params, &tokens, seqs.len(), len, &ForwardOptions::default())?;
    let v = task.vocab_size();
    let classes = task.classes();
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    for (r, row) in logits.data().chunks_exact(v).enumerate() {
        let p = r % len;
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0;
        let ok = usize::from(pred == tokens[r]);
        let c = PositionClass::ALL.iter().position(|&c| c == classes[p]).expect("known class");
        hits[c] += ok;
        totals[c] += 1;
        if (p + 1).is_multiple_of(k) {
            hits[3] += ok;
            totals[3] += 1;
        }
    }
    let frac = |i: usize| if totals[i] == 0 { 0.0 } else { hits[i] as f64 / totals[i] as f64 };
    Ok(ClassAccuracy {
        step,
        chunk_start: frac(0),
        separator: frac(1),
        chunk_end: frac(2),
        group_end: frac(3),
    })
}

/// Trains a small model on freshly drawn repeats sequences and reports
/// per-class accuracy on a fixed held-out set every `eval_every` steps.
pub fn expressivity_experiment(
    cfg: &ExpressivityConfig,
    mut on_eval: impl FnMut(&ClassAccuracy),
) -> Result<ExpressivityResult> {
    let task = cfg.task;
    if !task.length.is_multiple_of(cfg.k) {
        return Err(Error::Config(format!(
            "task length {} is not divisible by k = {}",
            task.length, cfg.k
        )));
    }
    let model = Hourglass::new(ModelSpec {
        cfg: ModelConfig {
            vocab_size: task.vocab_size(),
            d_model: cfg.d_model,
            d_ff: cfg.d_ff,
            n_heads: cfg.n_heads,
            dropout: 0.0,
            attention_window: None,
            max_len: task.length,
        },
        hierarchy: cfg.hierarchy()?,
        shorten: ShortenMethod::LinearPool,
        upsample: UpsampleMethod::Linear,
        sfd: SfdSpec::disabled(),
    })?;
    let train_cfg = TrainConfig {
        batch_size: cfg.batch,
        seq_len: task.length,
        steps: cfg.max_steps,
        lr_peak: cfg.lr,
        warmup_steps: cfg.warmup.min(cfg.max_steps),
        schedule: Schedule::CosineCycle { total: cfg.max_steps },
        adam: AdamConfig::default(),
        seed: cfg.seed,
        eval_every: cfg.eval_every.max(1),
        eval_batches: 1,
    };
    let mut trainer = Trainer::<f32>::new(model, train_cfg)?;
    let held_out = gen_repeats(&task, cfg.eval_sequences, cfg.seed ^ 0xE7A1).sequences;
    let mut history = Vec::new();
    let mut failure = None;
    let last = cfg.stop_after.map_or(cfg.max_steps, |s| s.min(cfg.max_steps));
    while trainer.state.step < last {
        let step = trainer.state.step;
        let batch = gen_repeats(&task, cfg.batch, cfg.seed.wrapping_mul(1_000_003).wrapping_add(step)).sequences;
        match trainer.step_tokens(&batch.concat(), cfg.batch, task.length, None) {
            Ok(_) => {}
            Err(e @ Error::NonFinite { .. }) => {
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
        let step = trainer.state.step;
        if step % cfg.eval_every == 0 || step == last {
            let acc = accuracy(&trainer, &task, &held_out, cfg.k, step)?;
            on_eval(&acc);
            history.push(acc);
            if cfg.stop_at.is_some_and(|t| acc.chunk_end > t) {
                break;
            }
        }
    }
    Ok(ExpressivityResult {
        history,
        steps: trainer.state.step,
        failure,
    })
}
