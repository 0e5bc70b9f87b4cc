use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::error::Result;
use crate::model::Hourglass;
use crate::nn::{Ctx, InitScheme};
use crate::tensor::{Float, Graph};
use crate::train::{lm_loss, TrainConfig, Trainer};
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMeasurement {
    /// Median wall time of one training step.
    pub step_seconds: f64,
    pub samples: Vec<f64>,
    /// Words held by the recorded graph of one training step.
    pub activation_words: u64,
    /// Matmul FLOPs of one forward pass.
    pub forward_flops: u64,
}

/// Times `steps` training steps on random tokens after `warmup` untimed
/// ones and reports the median.
pub fn measure_run<T: Float>(model: &Hourglass, cfg: &TrainConfig, warmup: usize, steps: usize) -> Result<RunMeasurement> {
    let mut trainer = Trainer::<T>::new(model.clone(), cfg.clone())?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let (b, l, vocab) = (cfg.batch_size, cfg.seq_len, model.cfg().vocab_size);
    let mut tokens = || (0..b * l).map(|_| rng.random_range(0..vocab)).collect::<Vec<_>>();
    for _ in 0..warmup {
        trainer.step_tokens(&tokens(), b, l, None)?;
    }
    let mut samples = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = tokens();
        let start = Instant::now();
        trainer.step_tokens(&t, b, l, None)?;
        samples.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let step_seconds = if sorted.is_empty() { 0.0 } else { sorted[sorted.len() / 2] };

    let t = tokens();
    let g = Graph::<T>::new();
    let mut drop_rng = Rng::seed_from_u64(0);
    let ctx = Ctx::train(&g, model.cfg(), &trainer.state.params, &mut drop_rng);
    let logits = model.forward(&ctx, &t, b, l, &Default::default())?;
    let forward_flops = g.flops();
    let loss = lm_loss(&g, logits, &t, None)?;
    g.backward(loss)?;
    Ok(RunMeasurement {
        step_seconds,
        samples,
        activation_words: g.activation_words(),
        forward_flops,
    })
}

/// Matmul FLOPs of one inference forward pass over `batch × len` tokens.
pub fn count_forward_flops(model: &Hourglass, batch: usize, len: usize, seed: u64) -> Result<u64> {
    let params = model.init_params::<f32>(seed, InitScheme::Standard)?;
    let mut rng = Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..batch * len).map(|_| rng.random_range(0..model.cfg().vocab_size)).collect();
    let g = Graph::<f32>::new();
    let ctx = Ctx::eval(&g, model.cfg(), &params);
    model.forward(&ctx, &tokens, batch, len, &Default::default())?;
    Ok(g.flops())
}
