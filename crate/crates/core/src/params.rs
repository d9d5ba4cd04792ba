//! Learnable state: initialisation, plain SGD and the `FMC1` checkpoint codec.

use alloc::collections::btree_map;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::codec::{FormatError, Reader, Writer};
use crate::graph::Gradients;
use crate::rng::rng_from;
use crate::tensor::{numel, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMC1";

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    /// `N(0, 1/dim)`.
    Embedding { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    /// A `[fan_in, fan_out]` weight matrix.
    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self::new(name, [fan_in, fan_out], Init::Xavier { fan_in, fan_out })
    }

    pub fn bias(name: impl Into<String>, dim: usize) -> Self {
        Self::new(name, [dim], Init::Zeros)
    }
}

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams(BTreeMap<String, Tensor>);

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Euclidean distance over all entries; `None` if the key sets differ.
    pub fn distance(&self, other: &ModelParams) -> Option<f64> {
        if self.0.len() != other.0.len() {
            return None;
        }
        let mut sq = 0.0;
        for (name, a) in &self.0 {
            let b = other.0.get(name)?;
            if a.shape() != b.shape() {
                return None;
            }
            sq += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        Some(libm::sqrt(sq))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u32(self.0.len() as u32);
        for (name, t) in &self.0 {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes, CHECKPOINT_MAGIC)?;
        let count = r.u32()?;
        let mut out = ModelParams::new();
        for _ in 0..count {
            let at = r.offset();
            let len = r.u32()? as usize;
            let name: String = core::str::from_utf8(r.bytes(len)?)
                .map_err(|_| FormatError::Invalid {
                    offset: at,
                    detail: "parameter name is not UTF-8".into(),
                })?
                .into();
            let at = r.offset();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if shape.contains(&0) {
                return Err(FormatError::Invalid {
                    offset: at,
                    detail: format!("zero dimension in shape {shape:?}"),
                });
            }
            let n = numel(&shape);
            r.require(n.saturating_mul(8))?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            out.insert(name, Tensor::new(shape, data).expect("shape validated"));
        }
        r.finish()?;
        Ok(out)
    }
}

impl FromIterator<(String, Tensor)> for ModelParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Draws parameters for `spec` deterministically from `seed`.
pub fn init_params(spec: &[ParamSpec], seed: u64) -> Result<ModelParams, TensorError> {
    if spec.is_empty() {
        return Err(TensorError::Contract("init_params: empty parameter spec".into()));
    }
    let mut rng = rng_from(seed);
    let mut params = ModelParams::new();
    for p in spec {
        let n = numel(&p.shape);
        let data: Vec<f64> = match p.init {
            Init::Xavier { fan_in, fan_out } => {
                let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Zeros => alloc::vec![0.0; n],
            Init::Embedding { dim } => {
                let normal = Normal::new(0.0, libm::sqrt(1.0 / dim as f64))
                    .map_err(|e| TensorError::Contract(format!("{}: {e}", p.name)))?;
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::new(p.shape.clone(), data).map_err(|_| {
            TensorError::Contract(format!("init_params: invalid shape {:?} for `{}`", p.shape, p.name))
        })?;
        params.insert(p.name.clone(), t);
    }
    Ok(params)
}

/// Adds `U(-scale, scale)` noise to every entry. Moves a zero-bias
/// initialisation off ReLU kinks and exact-zero rows.
pub fn perturb(params: &ModelParams, scale: f64, seed: u64) -> ModelParams {
    let mut rng = rng_from(seed);
    let mut out = params.clone();
    for t in out.0.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..=scale);
        }
    }
    out
}

/// Plain SGD: `theta <- theta - lr * grad` for every entry.
pub fn sgd_step(params: &ModelParams, grads: &Gradients, lr: f64) -> Result<ModelParams, TensorError> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grads, lr)?;
    Ok(next)
}

pub fn sgd_step_in_place(params: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<(), TensorError> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(TensorError::Contract(format!("sgd_step: invalid learning rate {lr}")));
    }
    for (name, t) in params.0.iter() {
        match grads.get(name) {
            None => return Err(TensorError::Contract(format!("sgd_step: missing gradient for `{name}`"))),
            Some(g) if g.shape() != t.shape() => {
                return Err(TensorError::Dimension {
                    op: "sgd_step",
                    shapes: alloc::vec![t.shape().to_vec(), g.shape().to_vec()],
                })
            }
            Some(_) => {}
        }
    }
    for (name, t) in params.0.iter_mut() {
        let g = &grads[name];
        for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}
