use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng as _, SeedableRng};

use super::{bpc, lm_loss, position_nats, save_checkpoint, Adam, TrainConfig};
use crate::data::{Batch, Batcher, Corpus};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Hourglass};
use crate::nn::{Ctx, InitScheme, Params};
use crate::tensor::{Float, Graph};
use crate::Rng;

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: Params<T>,
    pub adam: Adam<T>,
    /// Optimisation steps completed.
    pub step: u64,
    /// Drives dropout masks and shorten-factor draws.
    pub rng: Rng,
}

impl<T: Float> PartialEq for TrainState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.adam == other.adam
            && self.step == other.step
            && self.rng.get_seed() == other.rng.get_seed()
            && self.rng.get_word_pos() == other.rng.get_word_pos()
            && self.rng.get_stream() == other.rng.get_stream()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Step number after the update (1-based).
    pub step: u64,
    pub lr: f64,
    pub bpc: f64,
    pub sfd_k: Option<usize>,
}

pub const METRICS_HEADER: &str = "step,lr,train_bpc,val_bpc,wall_seconds,sfd_k";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub train_bpc: f64,
    pub val_bpc: Option<f64>,
    pub wall_seconds: f64,
    pub sfd_k: Option<usize>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{:e},{:.6},{},{:.3},{}",
            self.step,
            self.lr,
            self.train_bpc,
            opt(self.val_bpc.map(|v| format!("{v:.6}"))),
            self.wall_seconds,
            opt(self.sfd_k.map(|k| k.to_string())),
        )
    }
}

/// Appends metrics rows to a CSV file, writing the header for a new file.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let fresh = !append || !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = MetricsWriter {
            out: BufWriter::new(file),
            path,
        };
        if fresh {
            w.line(METRICS_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.line(&row.csv_line())
    }
}

/// Deterministic training loop: the run is a pure function of the model
/// spec, the training config and the data.
pub struct Trainer<T: Float> {
    model: Hourglass,
    cfg: TrainConfig,
    pub state: TrainState<T>,
}

const RNG_SALT: u64 = 0x6a09_e667_f3bc_c908;

impl<T: Float> Trainer<T> {
    pub fn new(model: Hourglass, cfg: TrainConfig) -> Result<Self> {
        let params = model.init_params(cfg.seed, InitScheme::Standard)?;
        let state = TrainState {
            params,
            adam: Adam::new(cfg.adam),
            step: 0,
            rng: Rng::seed_from_u64(cfg.seed ^ RNG_SALT),
        };
        Trainer::from_state(model, cfg, state)
    }

    pub fn from_state(model: Hourglass, cfg: TrainConfig, state: TrainState<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = model.param_specs().len();
        if state.params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "state holds {} parameters, the model declares {expected}",
                state.params.len()
            )));
        }
        Ok(Trainer { model, cfg, state })
    }

    pub fn model(&self) -> &Hourglass {
        &self.model
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }

    /// Shorten factor used for evaluation: the smallest trained one when
    /// shorten-factor dropout is on.
    pub fn eval_options(&self) -> ForwardOptions {
        let sfd = &self.model.spec().sfd;
        ForwardOptions {
            shorten_factor: sfd.enabled.then(|| sfd.factor_set[0]),
            ..ForwardOptions::default()
        }
    }

    /// One update on row-major `[batch, len]` tokens. The model predicts
    /// every token from those before it, so the tokens are their own
    /// targets; `mask` restricts which positions enter the loss.
    pub fn step_tokens(&mut self, tokens: &[usize], batch: usize, len: usize, mask: Option<&[bool]>) -> Result<StepStats> {
        let step = self.state.step + 1;
        let lr = self.cfg.lr_at(step);
        let sfd = &self.model.spec().sfd;
        let sfd_k = sfd
            .enabled
            .then(|| sfd.factor_set[self.state.rng.random_range(0..sfd.factor_set.len())]);
        let opts = ForwardOptions {
            shorten_factor: sfd_k,
            ..ForwardOptions::default()
        };
        let g = Graph::new();
        let (loss, grads) = {
            let ctx = Ctx::train(&g, self.model.cfg(), &self.state.params, &mut self.state.rng);
            let logits = self.model.forward(&ctx, tokens, batch, len, &opts)?;
            let loss = lm_loss(&g, logits, tokens, mask)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    path: "loss".into(),
                    step,
                });
            }
            g.backward(loss)?;
            (value, ctx.param_grads())
        };
        self.state.adam.step(&mut self.state.params, &grads, lr)?;
        self.state.step = step;
        Ok(StepStats {
            step,
            lr,
            bpc: bpc(loss),
            sfd_k,
        })
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepStats> {
        self.step_tokens(&batch.inputs, batch.batch, batch.len, None)
    }

    /// Mean BPC over the first `eval_batches · batch_size` contiguous
    /// windows of `data`.
    pub fn eval_bpc(&self, data: &[u8]) -> Result<f64> {
        let (b, l) = (self.cfg.batch_size, self.cfg.seq_len);
        let windows = (data.len() / l).min(self.cfg.eval_batches.saturating_mul(b));
        if windows == 0 {
            return Err(Error::Usage(format!(
                "validation data of {} bytes holds no {l}-byte window",
                data.len()
            )));
        }
        let opts = self.eval_options();
        let mut total = 0.0;
        let mut count = 0usize;
        for first in (0..windows).step_by(b) {
            let rows = b.min(windows - first);
            let tokens: Vec<usize> = data[first * l..(first + rows) * l].iter().map(|&x| x as usize).collect();
            let logits = self.model.logits(&self.state.params, &tokens, rows, l, &opts)?;
            let nats = position_nats(&logits, &tokens)?;
            total += nats.iter().sum::<f64>();
            count += nats.len();
        }
        Ok(bpc(total / count as f64))
    }

    /// Trains until `until` steps have been completed, evaluating on the
    /// validation split every `eval_every` steps and at the end. Each step
    /// produces one metrics row. When `checkpoint` is given, the state is
    /// saved there at every evaluation together with `config_text`.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        until: u64,
        mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
        checkpoint: Option<(&Path, &str)>,
    ) -> Result<()> {
        let mut batcher = Batcher::new(&corpus.train, self.cfg.seq_len, self.cfg.batch_size, self.cfg.seed)?;
        let start = Instant::now();
        while self.state.step < until {
            let batch = batcher.batch(self.state.step);
            let stats = self.train_step(&batch)?;
            let evaluate = stats.step % self.cfg.eval_every == 0 || stats.step == until;
            let val_bpc = if evaluate { Some(self.eval_bpc(&corpus.valid)?) } else { None };
            let row = MetricsRow {
                step: stats.step,
                lr: stats.lr,
                train_bpc: stats.bpc,
                val_bpc,
                wall_seconds: start.elapsed().as_secs_f64(),
                sfd_k: stats.sfd_k,
            };
            log::debug!("{}", row.csv_line());
            on_row(&row)?;
            if let (true, Some((path, text))) = (evaluate, checkpoint) {
                save_checkpoint(path, text, &self.state)?;
            }
        }
        Ok(())
    }
}
