//! Central finite-difference verification of graph gradients.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::graph::{Graph, NodeId, ParamNodes};
use crate::params::ModelParams;
use crate::tensor::TensorError;

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("loss closure is not deterministic: {first} then {second}")]
    Determinism { first: f64, second: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Worst entry of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares backward gradients of `loss_fn` at `params` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, entry by entry.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &ModelParams,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Graph, &ParamNodes) -> Result<NodeId, TensorError>,
{
    if !(epsilon > 0.0) {
        return Err(GradCheckError::Epsilon(epsilon));
    }
    if params.is_empty() {
        return Ok(GradCheckReport {
            params: Vec::new(),
            tolerance,
            pass: true,
        });
    }

    let mut g = Graph::new();
    let nodes = g.register(params);
    let loss = loss_fn(&mut g, &nodes)?;
    let first = g.value(loss).item();
    let grads = g.backward(loss)?;

    let mut eval = |p: &ModelParams| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let nodes = g.constants(p);
        let loss = loss_fn(&mut g, &nodes)?;
        Ok(g.value(loss).item())
    };
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::Determinism { first, second });
    }

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let analytic = grads[name].data();
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: analytic[0],
            numeric: analytic[0],
        };
        for i in 0..tensor.len() {
            let base = tensor.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = base + epsilon;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = base - epsilon;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[i], numeric);
            if err > worst.max_rel_error {
                worst = ParamCheck {
                    name: name.clone(),
                    max_rel_error: err,
                    worst_index: i,
                    analytic: analytic[i],
                    numeric,
                };
            }
        }
        report.push(worst);
    }
    let pass = report.iter().all(|p| p.max_rel_error < tolerance);
    Ok(GradCheckReport {
        params: report,
        tolerance,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn empty_params_pass_vacuously() {
        let report = grad_check(|g, _| Ok(g.constant(Tensor::scalar(1.0))), &ModelParams::new(), 1e-6, 1e-4).unwrap();
        assert!(report.pass);
        assert!(report.params.is_empty());
    }

    #[test]
    fn non_deterministic_closure_is_reported() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut calls = 0.0;
        let err = grad_check(
            |g, n| {
                calls += 1.0;
                let w = n.get("w")?;
                let c = g.constant(Tensor::new(vec![1], vec![calls]).unwrap());
                let y = g.mul(w, c)?;
                g.sum(y)
            },
            &p,
            1e-6,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, GradCheckError::Determinism { .. }));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        assert_eq!(
            grad_check(|g, _| Ok(g.constant(Tensor::scalar(0.0))), &ModelParams::new(), 0.0, 1e-4),
            Err(GradCheckError::Epsilon(0.0))
        );
    }
}
