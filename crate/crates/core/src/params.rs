//! Named parameter storage and per-tape binding.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DType, Gradients, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// How a parameter is optimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamGroup {
    /// Ordinary real weights (AdamW).
    Euclidean,
    /// Rows are points on a Lorentz manifold of curvature `c` (Riemannian Adam).
    Manifold { c: f64 },
    /// A positive scalar stored as `log(v)`, with `v` clamped to `[lo, hi]`.
    LogScalar { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Frozen parameters are bound on the tape but never updated.
    pub frozen: bool,
}

impl Param {
    /// Value seen by the model. For log scalars this is `clamp(exp(stored))`.
    pub fn effective(&self) -> Tensor {
        match self.group {
            ParamGroup::LogScalar { lo, hi } => Tensor::scalar(log_scalar_value(self.value.item(), lo, hi)),
            _ => self.value.clone(),
        }
    }
}

/// `exp(stored)` clamped to `[lo, hi]`; the bounds themselves are returned
/// exactly once reached.
pub fn log_scalar_value(stored: f64, lo: f64, hi: f64) -> f64 {
    stored.exp().clamp(lo, hi)
}

/// Stored form of `value`, nudged outward at the bounds so that
/// [`log_scalar_value`] reproduces `lo` and `hi` exactly.
pub fn log_scalar_store(value: f64, lo: f64, hi: f64) -> f64 {
    const MARGIN: f64 = 1e-5;
    if value <= lo {
        lo.ln() - MARGIN
    } else if value >= hi {
        hi.ln() + MARGIN
    } else {
        value.ln()
    }
}

/// Ordered, named parameter set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, group: ParamGroup) -> Result<()> {
        if self.index.contains_key(name) {
            bail!(Usage, "duplicate parameter {}", name);
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            group,
            frozen: false,
        });
        Ok(())
    }

    /// Registers a weight drawn from `N(0, std^2)`.
    pub fn insert_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::with_dtype(shape, data, DType::F32)?, ParamGroup::Euclidean)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::full(shape, value).to_dtype(DType::F32), ParamGroup::Euclidean)
    }

    /// Registers a log-space scalar initialised at `init`.
    pub fn insert_log_scalar(&mut self, name: &str, init: f64, lo: f64, hi: f64) -> Result<()> {
        if !(lo > 0.0 && lo <= init && init <= hi) {
            bail!(Config, "{}: init {} outside [{}, {}]", name, init, lo, hi);
        }
        self.insert(name, Tensor::scalar(log_scalar_store(init, lo, hi)), ParamGroup::LogScalar { lo, hi })
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&self.params[i]),
            None => bail!(Usage, "unknown parameter {}", name),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => bail!(Usage, "unknown parameter {}", name),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Shapes in registration order, keyed by name.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets a log scalar's effective value (clamped to its range).
    pub fn set_log_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        let p = self.get_mut(name)?;
        let ParamGroup::LogScalar { lo, hi } = p.group else {
            bail!(Usage, "{} is not a log scalar", name);
        };
        p.value = Tensor::scalar(log_scalar_store(value, lo, hi));
        Ok(())
    }

    pub fn scalar_value(&self, name: &str) -> Result<f64> {
        Ok(self.get(name)?.effective().item())
    }
}

/// Lazily binds parameters onto a tape the first time a layer asks for them.
pub struct Binder<'a> {
    params: Option<&'a ModelParams>,
    vars: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params: Some(params),
            vars: HashMap::new(),
        }
    }

    /// A binder over already-recorded variables (used by gradient checks).
    pub fn from_vars(vars: HashMap<String, Var>) -> Self {
        Self { params: None, vars }
    }

    pub fn var(&mut self, t: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let Some(params) = self.params else {
            bail!(Usage, "parameter {} was not bound", name);
        };
        let v = t.leaf(&params.get(name)?.effective())?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects gradients for every bound parameter, keyed by name.
    pub fn gradients(&self, grads: &Gradients) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get(*v)))
            .collect()
    }
}
