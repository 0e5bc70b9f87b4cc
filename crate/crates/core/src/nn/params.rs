use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::Rng;

/// What a parameter is for; decides how it gets initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Dense projection with the given fan-in.
    Weight { fan_in: usize },
    Embedding,
    RelTable,
    /// Per-head content/position bias of relative attention.
    AttnBias,
    Bias,
    Gain,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

/// Ordered list of parameters a model declares before initialisation.
#[derive(Clone, Debug, Default)]
pub struct ParamSpecs {
    specs: Vec<ParamSpec>,
}

impl ParamSpecs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<String>, shape: &[usize], role: Role) {
        self.specs.push(ParamSpec {
            path: path.into(),
            shape: shape.to_vec(),
            role,
        });
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamSpec> {
        self.specs.iter()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

/// Initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Truncated normal σ=0.02 for weights and tables, zero biases, unit gains.
    Standard,
    /// Every parameter random at O(1) scale; used to audit dependency
    /// structure where a coincidental zero would hide an edge.
    Audit,
}

fn truncated_normal(rng: &mut Rng, sigma: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

/// Registry of named learnable tensors, iterated in path order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for Params<T> {
    fn default() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }
}

impl<T: Float> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn initialize(specs: &ParamSpecs, seed: u64, scheme: InitScheme) -> Result<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for spec in specs.iter() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match (scheme, spec.role) {
                (InitScheme::Standard, Role::Bias | Role::AttnBias) => vec![0.0; n],
                (InitScheme::Standard, Role::Gain) => vec![1.0; n],
                (InitScheme::Standard, _) => {
                    (0..n).map(|_| truncated_normal(&mut rng, 0.02)).collect()
                }
                (InitScheme::Audit, Role::Weight { fan_in }) => {
                    let s = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| truncated_normal(&mut rng, s)).collect()
                }
                (InitScheme::Audit, Role::Gain) => {
                    (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
                }
                (InitScheme::Audit, _) => (0..n).map(|_| truncated_normal(&mut rng, 0.5)).collect(),
            };
            params.insert(spec.path.clone(), Tensor::from_f64(&spec.shape, &data)?)?;
        }
        Ok(params)
    }

    pub fn insert(&mut self, path: String, value: Tensor<T>) -> Result<()> {
        if self.map.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        self.map.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.map
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(path)
            .ok_or_else(|| Error::Config(format!("missing parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn paths(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Zeroes every parameter whose path ends with one of `suffixes`.
    pub fn zero_matching(&mut self, suffixes: &[&str]) {
        for (path, t) in self.map.iter_mut() {
            if suffixes.iter().any(|s| path.ends_with(s)) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> ParamSpecs {
        let mut s = ParamSpecs::new();
        s.add("a/w", &[4, 3], Role::Weight { fan_in: 4 });
        s.add("a/b", &[3], Role::Bias);
        s.add("a/gain", &[3], Role::Gain);
        s
    }

    #[test]
    fn standard_init_conventions() {
        let p = Params::<f64>::initialize(&specs(), 1, InitScheme::Standard).unwrap();
        assert!(p.get("a/b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("a/gain").unwrap().data().iter().all(|&v| v == 1.0));
        let w = p.get("a/w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(w.data().iter().any(|&v| v != 0.0));
        assert_eq!(p.count(), 18);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Params::<f32>::initialize(&specs(), 7, InitScheme::Audit).unwrap();
        let b = Params::<f32>::initialize(&specs(), 7, InitScheme::Audit).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_path_rejected() {
        let mut p = Params::<f64>::new();
        p.insert("x".into(), Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("x".into(), Tensor::zeros(&[1])).is_err());
    }
}
