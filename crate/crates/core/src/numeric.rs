//! Differentiable primitives with hand-written vector-Jacobian products,
//! plus the central-difference gradient oracle used to check them.
//!
//! Everything here is a pure function of its inputs and computes in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logistic function, evaluated with the two-branch form so that neither
/// branch exponentiates a large positive number.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// dσ/dx = σ(x)(1 − σ(x)).
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// `ln σ(x)` without forming σ(x); finite for any finite `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid_tensor(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    out
}

/// Softmax of a single vector with max-shift stabilisation.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln softmax(v)` via log-sum-exp.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|&x| x - lse).collect()
}

/// Softmax along the last axis of a tensor of any rank.
pub fn softmax_last_axis(t: &Tensor) -> Tensor {
    let width = *t.shape().last().expect("tensor rank is at least 1");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(width) {
        let s = softmax(row);
        row.copy_from_slice(&s);
    }
    out
}

/// VJP of softmax given its output `y` and upstream gradient `dy`:
/// `dx_i = y_i (dy_i − Σ_j y_j dy_j)`.
pub fn softmax_vjp(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)).collect()
}

/// Attention result together with the weights needed for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// `n_q × d` pooled values.
    pub output: Tensor,
    /// `n_q × n_k` softmax weights; each row is a convex combination.
    pub weights: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub query: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (n_q, d) = q.dims2()?;
    let (n_k, dk) = k.dims2()?;
    let (n_v, dv) = v.dims2()?;
    if dk != d || dv != d || n_v != n_k {
        return Err(Error::Shape(format!(
            "attention expects Q n_q×d, K and V n_k×d; got {:?}, {:?}, {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((n_q, n_k, d))
}

/// Single-head scaled dot-product attention:
/// `out_i = Σ_j softmax_j(q_i·k_j / √d) v_j`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Attention> {
    let (n_q, n_k, d) = attention_dims(q, k, v)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Vec::with_capacity(n_q * n_k);
    let mut output = vec![0.0; n_q * d];
    for i in 0..n_q {
        let qi = q.row(i);
        let scores: Vec<f64> = (0..n_k).map(|j| dot(qi, k.row(j)) * scale).collect();
        let w = softmax(&scores);
        let out = &mut output[i * d..(i + 1) * d];
        for (j, &wj) in w.iter().enumerate() {
            axpy(wj, v.row(j), out);
        }
        weights.extend(w);
    }
    Ok(Attention {
        output: Tensor::new(vec![n_q, d], output)?,
        weights: Tensor::new(vec![n_q, n_k], weights)?,
    })
}

/// Backward pass of [`scaled_dot_attention`] given the forward weights and
/// the upstream gradient on the output.
pub fn scaled_dot_attention_vjp(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &Tensor,
    d_output: &Tensor,
) -> Result<AttentionGrads> {
    let (n_q, n_k, d) = attention_dims(q, k, v)?;
    if weights.shape() != [n_q, n_k] || d_output.shape() != [n_q, d] {
        return Err(Error::Shape(format!(
            "attention backward got weights {:?} and d_output {:?}",
            weights.shape(),
            d_output.shape()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; n_q * d];
    let mut dk = vec![0.0; n_k * d];
    let mut dv = vec![0.0; n_k * d];
    for i in 0..n_q {
        let w = weights.row(i);
        let dout = d_output.row(i);
        let dw: Vec<f64> = (0..n_k).map(|j| dot(dout, v.row(j))).collect();
        let dscores = softmax_vjp(w, &dw);
        for j in 0..n_k {
            axpy(w[j], dout, &mut dv[j * d..(j + 1) * d]);
            let ds = dscores[j] * scale;
            axpy(ds, k.row(j), &mut dq[i * d..(i + 1) * d]);
            axpy(ds, q.row(i), &mut dk[j * d..(j + 1) * d]);
        }
    }
    Ok(AttentionGrads {
        query: Tensor::new(vec![n_q, d], dq)?,
        keys: Tensor::new(vec![n_k, d], dk)?,
        values: Tensor::new(vec![n_k, d], dv)?,
    })
}

/// Denominator floor of the relative error. Central differences at
/// `eps = 1e-5` carry roundoff near `|f|·1e-16 / eps ≈ 1e-11`, so gradient
/// coordinates much smaller than this are compared almost absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|analytic − numeric| / max(REL_ERROR_FLOOR, |numeric|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// `f` is evaluated at `x ± eps·e_i` for every coordinate; it receives a
/// scratch copy of `x`, so the caller's point is never modified.
pub fn finite_difference_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "point has {} coordinates, analytic gradient {}",
            x.len(),
            analytic.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }
    let mut point = x.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: x.len(),
    };
    for i in 0..x.len() {
        point[i] = x[i] + eps;
        let plus = f(&point);
        point[i] = x[i] - eps;
        let minus = f(&point);
        point[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(REL_ERROR_FLOOR);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// [`finite_difference_check`] over a [`Tensor`] argument.
pub fn finite_difference_check_tensor<F>(
    mut f: F,
    x: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<GradCheck>
where
    F: FnMut(&Tensor) -> f64,
{
    if x.shape() != analytic.shape() {
        return Err(Error::Shape(format!(
            "point {:?} vs gradient {:?}",
            x.shape(),
            analytic.shape()
        )));
    }
    let shape = x.shape().to_vec();
    finite_difference_check(
        |p| f(&Tensor::new(shape.clone(), p.to_vec()).expect("shape preserved")),
        x.data(),
        analytic.data(),
        eps,
    )
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
