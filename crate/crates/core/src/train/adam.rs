use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{lit, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "adam betas must lie in [0, 1) and eps be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction; no weight decay and no gradient clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        for (path, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    path: path.clone(),
                    step: self.t + 1,
                });
            }
            let shape = params.get(path)?.shape();
            if shape != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for `{path}` of shape {shape:?}",
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2): (T, T) = (lit(self.cfg.beta1), lit(self.cfg.beta2));
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let step_size: T = lit(lr / c1);
        let inv_c2_sqrt: T = lit(1.0 / c2.sqrt());
        let eps: T = lit(self.cfg.eps);
        for (path, g) in grads {
            let p = params.get_mut(path)?;
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() * inv_c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
