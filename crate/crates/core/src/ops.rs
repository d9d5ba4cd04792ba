//! Forward and backward kernels for every operation kind the graph records.
//!
//! Kernels are pure: `forward` maps input tensors to an output plus an
//! auxiliary buffer (cached softmax probabilities, norms), and `backward`
//! maps the output gradient back onto each input that needs one.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::tensor::{numel, Tensor, TensorError};

/// Norm floor used by the cosine-similarity kernel.
pub const NORM_FLOOR: f64 = 1e-12;

/// The closed set of differentiable operations.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `[n,k] x [k,p] -> [n,p]`.
    MatMul,
    /// Elementwise sum; the second input may be a row vector broadcast over rows.
    Add,
    /// Elementwise difference with the same broadcasting rule as `Add`.
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    Relu,
    Sigmoid,
    Log,
    Exp,
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Mean of all entries, producing a scalar.
    Mean,
    /// Concatenation of 2-D inputs along axis 0 (rows) or 1 (columns).
    Concat { axis: usize },
    /// Rectangular window of a 2-D input.
    Slice { rows: Range<usize>, cols: Range<usize> },
    Reshape(Vec<usize>),
    /// Selects (and possibly repeats) rows of a 2-D input.
    GatherRows(Vec<usize>),
    /// Softmax of `x / tau` along each row. With `exclude_diagonal`, entry
    /// `(i, i)` is left out of row `i` and set to zero.
    RowSoftmax { tau: f64, exclude_diagonal: bool },
    /// Log-softmax counterpart of `RowSoftmax`; excluded entries are zero.
    RowLogSoftmax { tau: f64, exclude_diagonal: bool },
    /// Attention weights with a per-source denominator: for target `t` and
    /// source `s != t`, `exp(S[t,s]/tau) / sum_{u != t} exp(S[s,u]/tau)`,
    /// renormalised over `s`. Input is a square similarity matrix; output
    /// keeps the first `targets` rows.
    SourceNormalizedSoftmax { tau: f64, targets: usize },
    /// Pairwise cosine similarity of the rows of a 2-D input.
    CosineSimilarity,
    /// `[n,cin,l] * [cout,cin,3] + [cout] -> [n,cout,l]`, stride 1, padding 1.
    Conv1d,
    /// Mean cross-entropy of `[b,c]` logits against the stored labels.
    CrossEntropy(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::RowSoftmax { .. } => "row_softmax",
            OpKind::RowLogSoftmax { .. } => "row_log_softmax",
            OpKind::SourceNormalizedSoftmax { .. } => "source_normalized_softmax",
            OpKind::CosineSimilarity => "cosine_similarity",
            OpKind::Conv1d => "conv1d",
            OpKind::CrossEntropy(_) => "cross_entropy",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => Some(2),
            OpKind::Conv1d => Some(3),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Output of a forward kernel.
pub(crate) struct Forward {
    pub value: Tensor,
    pub aux: Vec<f64>,
    /// Rows whose norm was clamped (cosine similarity only).
    pub clamped: usize,
}

fn dim_err(kind: &OpKind, inputs: &[&Tensor]) -> TensorError {
    TensorError::Dimension {
        op: kind.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn matrix(kind: &OpKind, inputs: &[&Tensor], t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(dim_err(kind, inputs)),
    }
}

/// How the second operand of `Add`/`Sub` lines up with the first.
fn broadcast_rows(a: &Tensor, b: &Tensor) -> Option<bool> {
    if a.shape() == b.shape() {
        return Some(false);
    }
    let (_, cols) = match a.shape() {
        [r, c] => (*r, *c),
        _ => return None,
    };
    match b.shape() {
        [c] | [1, c] if *c == cols => Some(true),
        _ => None,
    }
}

fn check_tau(kind: &OpKind, tau: f64) -> Result<(), TensorError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Contract(format!(
            "{}: temperature must be positive, got {tau}",
            kind.name()
        )))
    }
}

fn included(exclude_diagonal: bool, row: usize, col: usize) -> bool {
    !(exclude_diagonal && row == col)
}

pub(crate) fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Forward, TensorError> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(TensorError::Contract(format!(
                "{} expects {n} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(TensorError::Contract(format!("{} expects inputs", kind.name())));
    }
    let mut aux = Vec::new();
    let mut clamped = 0;
    let value = match kind {
        OpKind::MatMul => {
            let (n, k) = matrix(kind, inputs, inputs[0])?;
            let (k2, p) = matrix(kind, inputs, inputs[1])?;
            if k != k2 {
                return Err(dim_err(kind, inputs));
            }
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let mut out = vec![0.0; n * p];
            for i in 0..n {
                let orow = &mut out[i * p..(i + 1) * p];
                for kk in 0..k {
                    let av = a[i * k + kk];
                    let brow = &b[kk * p..(kk + 1) * p];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::from_parts(vec![n, p], out)
        }
        OpKind::Add | OpKind::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            let bcast = broadcast_rows(a, b).ok_or_else(|| dim_err(kind, inputs))?;
            let sign = if matches!(kind, OpKind::Add) { 1.0 } else { -1.0 };
            let bd = b.data();
            let cols = bd.len();
            let out = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, av)| {
                    let bv = if bcast { bd[i % cols] } else { bd[i] };
                    av + sign * bv
                })
                .collect();
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(dim_err(kind, inputs));
            }
            let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), out)
        }
        OpKind::Scale(c) => map(inputs[0], |x| c * x),
        OpKind::Relu => map(inputs[0], |x| if x > 0.0 { x } else { 0.0 }),
        OpKind::Sigmoid => map(inputs[0], sigmoid),
        OpKind::Log => {
            if let Some(bad) = inputs[0].data().iter().find(|&&x| !(x > 0.0)) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
            map(inputs[0], libm::log)
        }
        OpKind::Exp => map(inputs[0], libm::exp),
        OpKind::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        OpKind::Mean => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        OpKind::Concat { axis } => concat(kind, *axis, inputs)?,
        OpKind::Slice { rows, cols } => {
            let (r, c) = matrix(kind, inputs, inputs[0])?;
            if rows.is_empty() || cols.is_empty() || rows.end > r || cols.end > c {
                return Err(dim_err(kind, inputs));
            }
            let x = inputs[0].data();
            let mut out = Vec::with_capacity(rows.len() * cols.len());
            for i in rows.clone() {
                out.extend_from_slice(&x[i * c + cols.start..i * c + cols.end]);
            }
            Tensor::from_parts(vec![rows.len(), cols.len()], out)
        }
        OpKind::Reshape(shape) => {
            if shape.iter().any(|&d| d == 0) || numel(shape) != inputs[0].len() {
                return Err(dim_err(kind, inputs));
            }
            Tensor::from_parts(shape.clone(), inputs[0].data().to_vec())
        }
        OpKind::GatherRows(idx) => {
            let (r, c) = matrix(kind, inputs, inputs[0])?;
            if idx.is_empty() || idx.iter().any(|&i| i >= r) {
                return Err(dim_err(kind, inputs));
            }
            let x = inputs[0].data();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(&x[i * c..(i + 1) * c]);
            }
            Tensor::from_parts(vec![idx.len(), c], out)
        }
        OpKind::RowSoftmax { tau, exclude_diagonal } | OpKind::RowLogSoftmax { tau, exclude_diagonal } => {
            check_tau(kind, *tau)?;
            let (r, c) = matrix(kind, inputs, inputs[0])?;
            if *exclude_diagonal && c < 2 {
                return Err(dim_err(kind, inputs));
            }
            let log = matches!(kind, OpKind::RowLogSoftmax { .. });
            let x = inputs[0].data();
            let mut out = vec![0.0; r * c];
            let mut probs = if log { vec![0.0; r * c] } else { Vec::new() };
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mut m = f64::NEG_INFINITY;
                for (j, v) in row.iter().enumerate() {
                    if included(*exclude_diagonal, i, j) && v / tau > m {
                        m = v / tau;
                    }
                }
                let mut z = 0.0;
                let exps = if log { &mut probs[i * c..(i + 1) * c] } else { &mut out[i * c..(i + 1) * c] };
                for (j, (v, e)) in row.iter().zip(exps.iter_mut()).enumerate() {
                    if included(*exclude_diagonal, i, j) {
                        *e = libm::exp(v / tau - m);
                        z += *e;
                    }
                }
                exps.iter_mut().for_each(|e| *e /= z);
                if log {
                    let lz = libm::log(z);
                    for (j, v) in row.iter().enumerate() {
                        if included(*exclude_diagonal, i, j) {
                            out[i * c + j] = v / tau - m - lz;
                        }
                    }
                }
            }
            aux = probs;
            Tensor::from_parts(vec![r, c], out)
        }
        OpKind::SourceNormalizedSoftmax { tau, targets } => {
            check_tau(kind, *tau)?;
            let (r, c) = matrix(kind, inputs, inputs[0])?;
            if r != c || r < 2 || *targets == 0 || *targets > r {
                return Err(dim_err(kind, inputs));
            }
            let (w, e) = source_normalized(inputs[0].data(), r, *targets, *tau);
            aux = e;
            Tensor::from_parts(vec![*targets, r], w)
        }
        OpKind::CosineSimilarity => {
            let (n, d) = matrix(kind, inputs, inputs[0])?;
            let x = inputs[0].data();
            let mut unit = vec![0.0; n * d];
            aux = vec![0.0; 2 * n];
            for i in 0..n {
                let row = &x[i * d..(i + 1) * d];
                let norm = libm::sqrt(row.iter().map(|v| v * v).sum());
                let r = if norm < NORM_FLOOR {
                    clamped += 1;
                    aux[n + i] = 1.0;
                    NORM_FLOOR
                } else {
                    norm
                };
                aux[i] = r;
                for (u, v) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *u = v / r;
                }
            }
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let s: f64 = unit[i * d..(i + 1) * d]
                        .iter()
                        .zip(&unit[j * d..(j + 1) * d])
                        .map(|(a, b)| a * b)
                        .sum();
                    out[i * n + j] = s;
                    out[j * n + i] = s;
                }
            }
            Tensor::from_parts(vec![n, n], out)
        }
        OpKind::Conv1d => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (n, cin, l) = match x.shape() {
                [n, c, l] => (*n, *c, *l),
                _ => return Err(dim_err(kind, inputs)),
            };
            let cout = match w.shape() {
                [o, c, 3] if *c == cin => *o,
                _ => return Err(dim_err(kind, inputs)),
            };
            if b.shape() != [cout] {
                return Err(dim_err(kind, inputs));
            }
            let (xd, wd, bd) = (x.data(), w.data(), b.data());
            let mut out = vec![0.0; n * cout * l];
            for s in 0..n {
                for o in 0..cout {
                    let orow = &mut out[(s * cout + o) * l..(s * cout + o + 1) * l];
                    orow.iter_mut().for_each(|v| *v = bd[o]);
                    for c in 0..cin {
                        let xrow = &xd[(s * cin + c) * l..(s * cin + c + 1) * l];
                        let k = &wd[(o * cin + c) * 3..(o * cin + c + 1) * 3];
                        for p in 0..l {
                            let mut acc = k[1] * xrow[p];
                            if p > 0 {
                                acc += k[0] * xrow[p - 1];
                            }
                            if p + 1 < l {
                                acc += k[2] * xrow[p + 1];
                            }
                            orow[p] += acc;
                        }
                    }
                }
            }
            Tensor::from_parts(vec![n, cout, l], out)
        }
        OpKind::CrossEntropy(labels) => {
            let (b, c) = matrix(kind, inputs, inputs[0])?;
            if labels.len() != b {
                return Err(dim_err(kind, inputs));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                return Err(TensorError::Contract(format!(
                    "cross_entropy: label {bad} out of range for {c} classes"
                )));
            }
            let x = inputs[0].data();
            let mut probs = vec![0.0; b * c];
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| libm::exp(v - m)).sum();
                for (p, v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *p = libm::exp(v - m) / z;
                }
                total += m + libm::log(z) - row[y];
            }
            aux = probs;
            Tensor::scalar(total / b as f64)
        }
    };
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: kind.name() });
    }
    Ok(Forward { value, aux, clamped })
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn concat(kind: &OpKind, axis: usize, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let dims: Vec<(usize, usize)> = inputs
        .iter()
        .map(|t| matrix(kind, inputs, t))
        .collect::<Result<_, _>>()?;
    match axis {
        0 => {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(dim_err(kind, inputs));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let data = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok(Tensor::from_parts(vec![rows, cols], data))
        }
        1 => {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(dim_err(kind, inputs));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for (t, d) in inputs.iter().zip(&dims) {
                    data.extend_from_slice(&t.data()[i * d.1..(i + 1) * d.1]);
                }
            }
            Ok(Tensor::from_parts(vec![rows, cols], data))
        }
        _ => Err(dim_err(kind, inputs)),
    }
}

/// Returns the `[targets, r]` weights and the shifted exponentials `E`.
fn source_normalized(s: &[f64], r: usize, targets: usize, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let shift = s.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| libm::exp(v / tau - shift)).collect();
    let rsum: Vec<f64> = (0..r).map(|i| e[i * r..(i + 1) * r].iter().sum()).collect();
    let mut w = vec![0.0; targets * r];
    for t in 0..targets {
        let row = &mut w[t * r..(t + 1) * r];
        let mut logits = vec![f64::NEG_INFINITY; r];
        let mut m = f64::NEG_INFINITY;
        for src in 0..r {
            if src == t {
                continue;
            }
            let denom = rsum[src] - e[src * r + t];
            let l = s[t * r + src] / tau - shift - libm::log(denom);
            logits[src] = l;
            m = m.max(l);
        }
        let mut z = 0.0;
        for src in 0..r {
            if src != t {
                row[src] = libm::exp(logits[src] - m);
                z += row[src];
            }
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    (w, e)
}

/// Gradients for each input, `None` where `needs[i]` is false.
pub(crate) fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    aux: &[f64],
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k) = (a.shape()[0], a.shape()[1]);
            let p = b.shape()[1];
            if needs[0] {
                let mut ga = vec![0.0; n * k];
                for i in 0..n {
                    let grow = &g[i * p..(i + 1) * p];
                    for kk in 0..k {
                        let brow = &b.data()[kk * p..(kk + 1) * p];
                        ga[i * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                grads[0] = Some(ga);
            }
            if needs[1] {
                let mut gb = vec![0.0; k * p];
                for i in 0..n {
                    let grow = &g[i * p..(i + 1) * p];
                    for kk in 0..k {
                        let av = a.data()[i * k + kk];
                        for (o, gv) in gb[kk * p..(kk + 1) * p].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                grads[1] = Some(gb);
            }
        }
        OpKind::Add | OpKind::Sub => {
            let sign = if matches!(kind, OpKind::Add) { 1.0 } else { -1.0 };
            if needs[0] {
                grads[0] = Some(g.to_vec());
            }
            if needs[1] {
                let cols = inputs[1].len();
                let mut gb = vec![0.0; cols];
                for (i, gv) in g.iter().enumerate() {
                    gb[i % cols] += sign * gv;
                }
                grads[1] = Some(gb);
            }
        }
        OpKind::Mul => {
            if needs[0] {
                grads[0] = Some(g.iter().zip(inputs[1].data()).map(|(x, y)| x * y).collect());
            }
            if needs[1] {
                grads[1] = Some(g.iter().zip(inputs[0].data()).map(|(x, y)| x * y).collect());
            }
        }
        OpKind::Scale(c) => grads[0] = Some(g.iter().map(|v| c * v).collect()),
        OpKind::Relu => {
            grads[0] = Some(
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )
        }
        OpKind::Sigmoid => {
            grads[0] = Some(g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect())
        }
        OpKind::Log => grads[0] = Some(g.iter().zip(inputs[0].data()).map(|(gv, x)| gv / x).collect()),
        OpKind::Exp => grads[0] = Some(g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect()),
        OpKind::Sum => grads[0] = Some(vec![g[0]; inputs[0].len()]),
        OpKind::Mean => {
            let n = inputs[0].len();
            grads[0] = Some(vec![g[0] / n as f64; n]);
        }
        OpKind::Concat { axis } => {
            let total_cols = out.shape()[1];
            let mut offset = 0;
            for (idx, t) in inputs.iter().enumerate() {
                let (r, c) = (t.shape()[0], t.shape()[1]);
                if needs[idx] {
                    let gi = if *axis == 0 {
                        g[offset * total_cols..(offset + r) * total_cols].to_vec()
                    } else {
                        let mut v = Vec::with_capacity(r * c);
                        for i in 0..r {
                            v.extend_from_slice(&g[i * total_cols + offset..i * total_cols + offset + c]);
                        }
                        v
                    };
                    grads[idx] = Some(gi);
                }
                offset += if *axis == 0 { r } else { c };
            }
        }
        OpKind::Slice { rows, cols } => {
            let c = inputs[0].shape()[1];
            let mut gx = vec![0.0; inputs[0].len()];
            let w = cols.len();
            for (k, i) in rows.clone().enumerate() {
                gx[i * c + cols.start..i * c + cols.end].copy_from_slice(&g[k * w..(k + 1) * w]);
            }
            grads[0] = Some(gx);
        }
        OpKind::Reshape(_) => grads[0] = Some(g.to_vec()),
        OpKind::GatherRows(idx) => {
            let c = inputs[0].shape()[1];
            let mut gx = vec![0.0; inputs[0].len()];
            for (k, &i) in idx.iter().enumerate() {
                for (o, gv) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                    *o += gv;
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::RowSoftmax { tau, .. } => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let y = out.data();
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[i * c + j] = yr[j] * (gr[j] - dot) / tau;
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::RowLogSoftmax { tau, exclude_diagonal } => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let gr = &g[i * c..(i + 1) * c];
                let total: f64 = (0..c)
                    .filter(|&j| included(*exclude_diagonal, i, j))
                    .map(|j| gr[j])
                    .sum();
                for j in 0..c {
                    if included(*exclude_diagonal, i, j) {
                        gx[i * c + j] = (gr[j] - aux[i * c + j] * total) / tau;
                    }
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::SourceNormalizedSoftmax { tau, targets } => {
            let r = inputs[0].shape()[0];
            let t_rows = *targets;
            let w = out.data();
            let e = aux;
            let rsum: Vec<f64> = (0..r).map(|i| e[i * r..(i + 1) * r].iter().sum()).collect();
            let mut gs = vec![0.0; r * r];
            // a[s * t_rows + t] = -dL/dlogit[t,s] / D[s,t]
            let mut a = vec![0.0; r * t_rows];
            for t in 0..t_rows {
                let wr = &w[t * r..(t + 1) * r];
                let gr = &g[t * r..(t + 1) * r];
                let dot: f64 = wr.iter().zip(gr).map(|(x, y)| x * y).sum();
                for s in 0..r {
                    if s == t {
                        continue;
                    }
                    let gl = wr[s] * (gr[s] - dot);
                    gs[t * r + s] += gl / tau;
                    let denom = rsum[s] - e[s * r + t];
                    a[s * t_rows + t] = -gl / denom;
                }
            }
            for s in 0..r {
                let arow = &a[s * t_rows..(s + 1) * t_rows];
                let total: f64 = arow.iter().sum();
                for u in 0..r {
                    let ge = if u < t_rows { total - arow[u] } else { total };
                    gs[s * r + u] += ge * e[s * r + u] / tau;
                }
            }
            grads[0] = Some(gs);
        }
        OpKind::CosineSimilarity => {
            let x = inputs[0];
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let norms = &aux[..n];
            let flags = &aux[n..];
            let unit: Vec<f64> = (0..n * d).map(|k| xd[k] / norms[k / d]).collect();
            let mut gx = vec![0.0; n * d];
            for i in 0..n {
                let mut gu = vec![0.0; d];
                for j in 0..n {
                    let coef = g[i * n + j] + g[j * n + i];
                    if coef == 0.0 {
                        continue;
                    }
                    for (o, u) in gu.iter_mut().zip(&unit[j * d..(j + 1) * d]) {
                        *o += coef * u;
                    }
                }
                let ui = &unit[i * d..(i + 1) * d];
                let proj = if flags[i] != 0.0 {
                    0.0
                } else {
                    gu.iter().zip(ui).map(|(a, b)| a * b).sum()
                };
                for k in 0..d {
                    gx[i * d + k] = (gu[k] - proj * ui[k]) / norms[i];
                }
            }
            grads[0] = Some(gx);
        }
        OpKind::Conv1d => {
            let (x, w) = (inputs[0], inputs[1]);
            let (n, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cout = w.shape()[0];
            let (xd, wd) = (x.data(), w.data());
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; cout];
            for s in 0..n {
                for o in 0..cout {
                    let grow = &g[(s * cout + o) * l..(s * cout + o + 1) * l];
                    gb[o] += grow.iter().sum::<f64>();
                    for c in 0..cin {
                        let xoff = (s * cin + c) * l;
                        let woff = (o * cin + c) * 3;
                        for p in 0..l {
                            let gv = grow[p];
                            gw[woff + 1] += gv * xd[xoff + p];
                            gx[xoff + p] += gv * wd[woff + 1];
                            if p > 0 {
                                gw[woff] += gv * xd[xoff + p - 1];
                                gx[xoff + p - 1] += gv * wd[woff];
                            }
                            if p + 1 < l {
                                gw[woff + 2] += gv * xd[xoff + p + 1];
                                gx[xoff + p + 1] += gv * wd[woff + 2];
                            }
                        }
                    }
                }
            }
            grads[0] = Some(gx);
            grads[1] = Some(gw);
            grads[2] = Some(gb);
        }
        OpKind::CrossEntropy(labels) => {
            let c = inputs[0].shape()[1];
            let b = labels.len() as f64;
            let mut gx: Vec<f64> = aux.iter().map(|p| p * g[0] / b).collect();
            for (i, &y) in labels.iter().enumerate() {
                gx[i * c + y] -= g[0] / b;
            }
            grads[0] = Some(gx);
        }
    }
    for (slot, need) in grads.iter_mut().zip(needs) {
        if !need {
            *slot = None;
        }
    }
    grads
}
