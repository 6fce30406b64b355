//! Matrix kernels and their reverse-mode gradients.
//!
//! Forward results are stored in the scalar type `S`; every reduction
//! (dot products, row sums, loss means) accumulates in f64 and narrows
//! once at the end. All functions are pure and deterministic.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot_wide, norm_wide, Matrix};
use crate::scalar::Scalar;

/// Probabilities are clamped into [PROB_CLAMP, 1 - PROB_CLAMP] before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Standard matrix product with f64 accumulation per output element.
pub fn matmul<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let bt = b.transpose();
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for r in 0..a.rows() {
        let arow = a.row(r);
        let orow = out.row_mut(r);
        for (c, o) in orow.iter_mut().enumerate() {
            *o = S::narrow(dot_wide(arow, bt.row(c)));
        }
    }
    Ok(out)
}

/// Row-wise softmax of `x / temperature`, max-subtracted for stability.
pub fn softmax_rows<S: Scalar>(x: &Matrix<S>, temperature: f64) -> Result<Matrix<S>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid_parameter(
            "temperature",
            format!("must be a positive finite real, got {temperature}"),
        ));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row
            .iter()
            .map(|v| v.wide())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut exps = vec![0.0f64; row.len()];
        let mut sum = 0.0f64;
        for (e, v) in exps.iter_mut().zip(row.iter()) {
            *e = ((v.wide() - max) / temperature).exp();
            sum += *e;
        }
        for (o, e) in out.row_mut(r).iter_mut().zip(exps.iter()) {
            *o = S::narrow(e / sum);
        }
    }
    Ok(out)
}

/// Gradient of `softmax_rows`: given probabilities `p` and upstream
/// `dp`, returns the gradient with respect to the pre-softmax input.
pub fn softmax_rows_backward<S: Scalar>(
    p: &Matrix<S>,
    dp: &Matrix<S>,
    temperature: f64,
) -> Result<Matrix<S>> {
    p.check_same_shape(dp, "softmax_rows_backward")?;
    let mut dx = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let prow = p.row(r);
        let drow = dp.row(r);
        let inner: f64 = prow
            .iter()
            .zip(drow.iter())
            .map(|(&pi, &di)| pi.wide() * di.wide())
            .sum();
        for (o, (&pi, &di)) in dx.row_mut(r).iter_mut().zip(prow.iter().zip(drow.iter())) {
            *o = S::narrow(pi.wide() * (di.wide() - inner) / temperature);
        }
    }
    Ok(dx)
}

/// Layer normalization of one row: zero mean, unit variance, then
/// an elementwise affine `gain * xhat + bias`.
pub fn layer_norm_row<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: f64) -> Result<Vec<S>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::ShapeMismatch {
            op: "layer_norm_row",
            left_rows: 1,
            left_cols: x.len(),
            right_rows: 1,
            right_cols: gain.len().max(bias.len()),
        });
    }
    let n = x.len() as f64;
    let mean: f64 = x.iter().map(|v| v.wide()).sum::<f64>() / n;
    let var: f64 = x
        .iter()
        .map(|v| {
            let d = v.wide() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let ivar = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(&v, (&g, &b))| S::narrow((v.wide() - mean) * ivar * g.wide() + b.wide()))
        .collect())
}

/// Binary cross-entropy averaged over all elements, plus its gradient
/// with respect to the probabilities.
///
/// Probabilities are clamped into `[1e-7, 1 - 1e-7]` before logs; the
/// gradient is evaluated at the clamped values.
pub fn binary_cross_entropy<S: Scalar>(
    probabilities: &Matrix<S>,
    targets: &Matrix<S>,
) -> Result<(f64, Matrix<S>)> {
    probabilities.check_same_shape(targets, "binary_cross_entropy")?;
    let count = (probabilities.rows() * probabilities.cols()) as f64;
    if count == 0.0 {
        return Err(Error::Empty {
            what: "binary_cross_entropy input".into(),
        });
    }
    let mut grad = Matrix::zeros(probabilities.rows(), probabilities.cols());
    let mut loss = 0.0f64;
    for (g, (&p, &y)) in grad
        .data_mut()
        .iter_mut()
        .zip(probabilities.data().iter().zip(targets.data().iter()))
    {
        let p = p.wide().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = y.wide();
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        *g = S::narrow((-y / p + (1.0 - y) / (1.0 - p)) / count);
    }
    Ok((loss / count, grad))
}

/// Elementwise max(0, x).
pub fn relu<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Gradient of relu: passes `dy` where the forward input was positive.
pub fn relu_backward<S: Scalar>(x: &Matrix<S>, dy: &Matrix<S>) -> Result<Matrix<S>> {
    x.zip_map(dy, "relu_backward", |xi, di| {
        if xi > S::zero() {
            di
        } else {
            S::zero()
        }
    })
}

/// Elementwise logistic sigmoid.
pub fn sigmoid<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    x.map(|v| S::narrow(1.0 / (1.0 + (-v.wide()).exp())))
}

/// Gradient of sigmoid given its output `y`: `dy * y * (1 - y)`.
pub fn sigmoid_backward<S: Scalar>(y: &Matrix<S>, dy: &Matrix<S>) -> Result<Matrix<S>> {
    y.zip_map(dy, "sigmoid_backward", |yi, di| {
        S::narrow(yi.wide() * (1.0 - yi.wide()) * di.wide())
    })
}

/// L2-normalize every row. Rows with norm below 1e-12 are left as zeros.
pub fn l2_normalize_rows<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let n = norm_wide(out.row(r));
        if n > 1e-12 {
            for v in out.row_mut(r) {
                *v = S::narrow(v.wide() / n);
            }
        }
    }
    out
}

/// Gradient of row normalization: needs the forward input `x` and the
/// normalized output `y`; `dx = (dy - y * (y . dy)) / ||x||`.
pub fn l2_normalize_rows_backward<S: Scalar>(
    x: &Matrix<S>,
    y: &Matrix<S>,
    dy: &Matrix<S>,
) -> Result<Matrix<S>> {
    x.check_same_shape(dy, "l2_normalize_rows_backward")?;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let n = norm_wide(x.row(r));
        if n <= 1e-12 {
            continue;
        }
        let ydy = dot_wide(y.row(r), dy.row(r));
        for (o, (&yi, &di)) in dx
            .row_mut(r)
            .iter_mut()
            .zip(y.row(r).iter().zip(dy.row(r).iter()))
        {
            *o = S::narrow((di.wide() - yi.wide() * ydy) / n);
        }
    }
    Ok(dx)
}
