//! Language-model loss, Adam, learning-rate schedules, the training loop,
//! overlapping-window evaluation and checkpoints.

mod adam;
mod checkpoint;
mod eval;
mod trainer;

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use eval::{eval_overlapping, plan_windows, position_nats, EvalReport, EvalWindow};
pub use trainer::{MetricsRow, MetricsWriter, StepStats, TrainState, Trainer, METRICS_HEADER};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Var};

/// Mean cross-entropy in nats over the positions selected by `mask`.
pub fn lm_loss<T: Float>(g: &Graph<T>, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
    let weights: Option<Vec<T>> =
        mask.map(|m| m.iter().map(|&on| if on { T::one() } else { T::zero() }).collect());
    g.cross_entropy(logits, targets, weights.as_deref())
}

/// Bits per character from a mean loss in nats.
pub fn bpc(nats: f64) -> f64 {
    nats / LN_2
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// Warmup, then a half cosine from the peak to zero at `total` steps.
    CosineCycle { total: u64 },
    /// Warmup, then `peak · √(warmup / step)`.
    InvSqrt,
}

impl Schedule {
    pub fn name(&self) -> &'static str {
        match self {
            Schedule::CosineCycle { .. } => "cosine",
            Schedule::InvSqrt => "inv_sqrt",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learning rate at `step` with linear warmup from 0 to `peak`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, schedule: Schedule) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match schedule {
        Schedule::CosineCycle { total } => {
            if total <= warmup {
                return if step == warmup { peak } else { 0.0 };
            }
            let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
            peak * 0.5 * (1.0 + (PI * progress).cos())
        }
        Schedule::InvSqrt => {
            let w = warmup.max(1) as f64;
            peak * (w / step.max(1) as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: u64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub eval_every: u64,
    /// Validation batches scored at every evaluation.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            seq_len: 512,
            steps: 2000,
            lr_peak: 4e-4,
            warmup_steps: 200,
            schedule: Schedule::CosineCycle { total: 2000 },
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 250,
            eval_batches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.lr_peak > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr_peak)));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.eval_every == 0 || self.eval_batches == 0 {
            return Err(Error::Config(
                "batch_size, seq_len, eval_every and eval_batches must be positive".into(),
            ));
        }
        self.adam.validate()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.lr_peak, self.warmup_steps, self.schedule)
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// Accepts `inv_sqrt`, `cosine` (cycle filled in by the caller) or
    /// `cosine:N`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.split_once(':') {
            None if s == "inv_sqrt" => Ok(Schedule::InvSqrt),
            None if s == "cosine" => Ok(Schedule::CosineCycle { total: 0 }),
            Some(("cosine", n)) => n
                .trim()
                .parse()
                .map(|total| Schedule::CosineCycle { total })
                .map_err(|_| Error::Config(format!("bad cosine cycle length `{n}`"))),
            _ => Err(Error::Config(format!(
                "unknown schedule `{s}` (expected cosine, cosine:N or inv_sqrt)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_log2_vocab() {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[2, 3, 256]));
        let loss = lm_loss(&g, logits, &[1, 2, 3, 4, 5, 255], None).unwrap();
        assert!((bpc(g.value(loss).item()) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_are_nearly_free() {
        let g = Graph::<f64>::new();
        let mut t = Tensor::zeros(&[1, 2, 4]);
        t.data_mut()[1] = 50.0;
        t.data_mut()[4 + 3] = 50.0;
        let loss = lm_loss(&g, g.constant(t), &[1, 3], None).unwrap();
        assert!(bpc(g.value(loss).item()) < 1e-3);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(matches!(
            lm_loss(&g, logits, &[0, 1], Some(&[false, false])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn schedule_endpoints() {
        let cos = Schedule::CosineCycle { total: 1000 };
        assert_eq!(lr_at(0, 1e-3, 100, cos), 0.0);
        assert_eq!(lr_at(100, 1e-3, 100, cos), 1e-3);
        assert!(lr_at(1000, 1e-3, 100, cos).abs() < 1e-12);
        assert!((lr_at(400, 1e-3, 100, Schedule::InvSqrt) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!("inv_sqrt".parse::<Schedule>().unwrap(), Schedule::InvSqrt);
        assert_eq!("cosine:50".parse::<Schedule>().unwrap(), Schedule::CosineCycle { total: 50 });
        assert!("linear".parse::<Schedule>().is_err());
    }
}
