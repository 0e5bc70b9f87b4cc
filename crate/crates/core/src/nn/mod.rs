//! Transformer building blocks: embeddings, pre-norm residual blocks,
//! FastGelu feed-forward and relative multi-head attention.

mod attention;
mod layers;
mod params;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub use attention::{
    declare_attention, rel_attention, rel_attention_with_weights, AttnGeometry, GeometryKind,
};
pub use layers::{
    declare_block, declare_feed_forward, declare_layernorm, declare_linear, dropout, embed,
    feed_forward, layernorm, linear, transformer_block, LN_EPS,
};
pub use params::{InitScheme, ParamSpec, ParamSpecs, Params, Role};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Var};
use crate::Rng;

/// Dimensional hyperparameters shared by every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Local attention span for full-resolution layers, if any.
    pub attention_window: Option<usize>,
    /// Longest token sequence the relative tables must cover.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 128,
            d_ff: 512,
            n_heads: 4,
            dropout: 0.15,
            attention_window: None,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.attention_window == Some(0) {
            return Err(Error::Config("attention_window must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Forward-pass context: binds registry parameters into a graph on first
/// use and carries the dropout state.
pub struct Ctx<'a, T: Float> {
    pub g: &'a Graph<T>,
    pub cfg: &'a ModelConfig,
    params: &'a Params<T>,
    bound: RefCell<HashMap<String, Var>>,
    trainable: bool,
    training: bool,
    rng: RefCell<Option<&'a mut Rng>>,
    geometries: RefCell<HashMap<(GeometryKind, usize, usize), Rc<AttnGeometry<T>>>>,
}

impl<'a, T: Float> Ctx<'a, T> {
    /// Evaluation context: no dropout, parameters frozen.
    pub fn eval(g: &'a Graph<T>, cfg: &'a ModelConfig, params: &'a Params<T>) -> Self {
        Ctx {
            g,
            cfg,
            params,
            bound: RefCell::new(HashMap::new()),
            trainable: false,
            training: false,
            rng: RefCell::new(None),
            geometries: RefCell::new(HashMap::new()),
        }
    }

    /// Training context: parameters require gradients; dropout draws from
    /// `rng` when `dropout > 0`.
    pub fn train(
        g: &'a Graph<T>,
        cfg: &'a ModelConfig,
        params: &'a Params<T>,
        rng: &'a mut Rng,
    ) -> Self {
        Ctx {
            trainable: true,
            training: true,
            rng: RefCell::new(Some(rng)),
            ..Ctx::eval(g, cfg, params)
        }
    }

    /// Parameters require gradients but dropout stays off (gradient checks).
    pub fn differentiable(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &Params<T> {
        self.params
    }

    pub fn param(&self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(path) {
            return Ok(v);
        }
        let t = self.params.get(path)?.clone();
        let v = self.g.leaf(t, self.trainable);
        self.bound.borrow_mut().insert(path.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for parameter `path` instead of the stored tensor, so that
    /// gradients with respect to a parameter can be taken from outside.
    pub fn bind(&self, path: &str, v: Var) {
        self.bound.borrow_mut().insert(path.to_string(), v);
    }

    /// Gradients of every bound parameter after a backward pass, in path
    /// order. Parameters that received no gradient are omitted.
    pub fn param_grads(&self) -> Vec<(String, crate::tensor::Tensor<T>)> {
        let bound = self.bound.borrow();
        let mut out: Vec<_> = bound
            .iter()
            .filter_map(|(p, &v)| self.g.grad(v).map(|t| (p.clone(), t)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub(crate) fn with_rng<R>(&self, f: impl FnOnce(&mut Rng) -> R) -> Option<R> {
        let mut slot = self.rng.borrow_mut();
        slot.as_deref_mut().map(f)
    }

    pub fn geometry(&self, kind: GeometryKind, len: usize, k: usize) -> Rc<AttnGeometry<T>> {
        let window = match kind {
            GeometryKind::LocalSelf => self.cfg.attention_window,
            _ => None,
        };
        Rc::clone(
            self.geometries
                .borrow_mut()
                .entry((kind, len, k))
                .or_insert_with(|| Rc::new(AttnGeometry::new(kind, len, k, window))),
        )
    }
}
