//! Trainable layers: affine, layer norm, dropout.
//!
//! Each layer exposes `forward` returning the output plus a cache of
//! whatever the backward pass needs; `backward` consumes the cache,
//! accumulates parameter gradients, and returns the input gradient.

use rand::Rng;

use crate::error::Result;
use crate::numerics::matrix::{dot_wide, Matrix};
use crate::numerics::ops;
use crate::numerics::param::Parameter;
use crate::scalar::Scalar;

/// Affine map `y = x W + b` with `W` of shape in x out.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

pub struct LinearCache<S: Scalar> {
    input: Matrix<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Parameter::xavier(format!("{name}.w"), d_in, d_out, rng),
            bias: Parameter::zeros(format!("{name}.b"), 1, d_out),
        }
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Parameter::zeros(format!("{name}.w"), d_in, d_out),
            bias: Parameter::zeros(format!("{name}.b"), 1, d_out),
        }
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<(Matrix<S>, LinearCache<S>)> {
        let mut y = ops::matmul(x, &self.weight.value)?;
        for r in 0..y.rows() {
            let brow = self.bias.value.row(0).to_vec();
            for (v, b) in y.row_mut(r).iter_mut().zip(brow.iter()) {
                *v = *v + *b;
            }
        }
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache<S>, dy: &Matrix<S>) -> Result<Matrix<S>> {
        let dw = ops::matmul(&cache.input.transpose(), dy)?;
        self.weight.accumulate_grad(&dw)?;
        let mut db = Matrix::zeros(1, dy.cols());
        for c in 0..dy.cols() {
            let mut acc = 0.0f64;
            for r in 0..dy.rows() {
                acc += dy.get(r, c).wide();
            }
            db.set(0, c, S::narrow(acc));
        }
        self.bias.accumulate_grad(&db)?;
        ops::matmul(dy, &self.weight.value.transpose())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn convert<T: Scalar>(&self) -> Linear<T> {
        Linear {
            weight: self.weight.convert(),
            bias: self.bias.convert(),
        }
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm<S: Scalar> {
    pub gain: Parameter<S>,
    pub bias: Parameter<S>,
    pub eps: f64,
}

pub struct LayerNormCache<S: Scalar> {
    xhat: Matrix<S>,
    ivar: Vec<f64>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(name: &str, dim: usize) -> Self {
        let mut gain = Matrix::zeros(1, dim);
        for v in gain.data_mut() {
            *v = S::one();
        }
        Self {
            gain: Parameter::new(format!("{name}.g"), gain),
            bias: Parameter::zeros(format!("{name}.b"), 1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<(Matrix<S>, LayerNormCache<S>)> {
        let n = x.cols() as f64;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut xhat = Matrix::zeros(x.rows(), x.cols());
        let mut ivars = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().map(|v| v.wide()).sum::<f64>() / n;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.wide() - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let ivar = 1.0 / (var + self.eps).sqrt();
            ivars.push(ivar);
            for c in 0..x.cols() {
                let xh = (x.get(r, c).wide() - mean) * ivar;
                xhat.set(r, c, S::narrow(xh));
                out.set(
                    r,
                    c,
                    S::narrow(xh * self.gain.value.get(0, c).wide() + self.bias.value.get(0, c).wide()),
                );
            }
        }
        Ok((out, LayerNormCache { xhat, ivar: ivars }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, dy: &Matrix<S>) -> Result<Matrix<S>> {
        let (rows, cols) = dy.shape();
        let n = cols as f64;
        let mut dgain = Matrix::zeros(1, cols);
        let mut dbias = Matrix::zeros(1, cols);
        for c in 0..cols {
            let mut ag = 0.0f64;
            let mut ab = 0.0f64;
            for r in 0..rows {
                ag += dy.get(r, c).wide() * cache.xhat.get(r, c).wide();
                ab += dy.get(r, c).wide();
            }
            dgain.set(0, c, S::narrow(ag));
            dbias.set(0, c, S::narrow(ab));
        }
        self.gain.accumulate_grad(&dgain)?;
        self.bias.accumulate_grad(&dbias)?;

        let mut dx = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let ivar = cache.ivar[r];
            // dxhat = dy * gain; then the standard two-sum form:
            // dx = ivar/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            let mut dxhat = vec![0.0f64; cols];
            for c in 0..cols {
                let d = dy.get(r, c).wide() * self.gain.value.get(0, c).wide();
                dxhat[c] = d;
                sum_dxhat += d;
                sum_dxhat_xhat += d * cache.xhat.get(r, c).wide();
            }
            for c in 0..cols {
                let xh = cache.xhat.get(r, c).wide();
                let v = ivar / n * (n * dxhat[c] - sum_dxhat - xh * sum_dxhat_xhat);
                dx.set(r, c, S::narrow(v));
            }
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.gain, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        vec![&self.gain, &self.bias]
    }

    pub fn convert<T: Scalar>(&self) -> LayerNorm<T> {
        LayerNorm {
            gain: self.gain.convert(),
            bias: self.bias.convert(),
            eps: self.eps,
        }
    }
}

/// Inverted dropout. Training mode draws a mask and rescales kept
/// activations by 1/(1-rate); eval mode is the identity.
pub fn dropout_forward<S: Scalar>(
    x: &Matrix<S>,
    rate: f64,
    train: bool,
    rng: &mut impl Rng,
) -> (Matrix<S>, Option<Matrix<S>>) {
    if !train || rate == 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - rate;
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for m in mask.data_mut() {
        *m = if rng.random::<f64>() < keep {
            S::narrow(1.0 / keep)
        } else {
            S::zero()
        };
    }
    let y = x
        .zip_map(&mask, "dropout", |a, m| a * m)
        .expect("mask shape matches");
    (y, Some(mask))
}

pub fn dropout_backward<S: Scalar>(dy: &Matrix<S>, mask: &Option<Matrix<S>>) -> Matrix<S> {
    match mask {
        None => dy.clone(),
        Some(m) => dy
            .zip_map(m, "dropout_backward", |d, mi| d * mi)
            .expect("mask shape matches"),
    }
}

/// Mean squared error against the L2-normalized target rows; used only
/// in tests as a simple differentiable objective.
pub fn half_frob_sq<S: Scalar>(m: &Matrix<S>) -> (f64, Matrix<S>) {
    let loss = 0.5 * m.frob_sq();
    (loss, m.clone())
}

/// Cosine-style dot of two row batches, row by row, f64 accumulated.
pub fn rowwise_dot<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Vec<f64>> {
    a.check_same_shape(b, "rowwise_dot")?;
    Ok((0..a.rows()).map(|r| dot_wide(a.row(r), b.row(r))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_applies_bias() {
        let mut l = Linear::<f32>::zeros("t", 2, 2);
        l.bias.value.set(0, 0, 1.5);
        l.bias.value.set(0, 1, -0.5);
        let x = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let (y, _) = l.forward(&x).unwrap();
        assert_eq!(y.data(), &[1.5, -0.5]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_masked() {
        let x = Matrix::from_vec(2, 4, vec![1.0f32; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y_eval, m) = dropout_forward(&x, 0.5, false, &mut rng);
        assert_eq!(y_eval, x);
        assert!(m.is_none());
        let (y_train, mask) = dropout_forward(&x, 0.5, true, &mut rng);
        let mask = mask.unwrap();
        for (v, m) in y_train.data().iter().zip(mask.data()) {
            assert!((*v == 0.0 && *m == 0.0) || (*v == 2.0 && *m == 2.0));
        }
    }

    #[test]
    fn layer_norm_batch_rows_zero_mean_unit_var() {
        let ln = LayerNorm::<f32>::new("t", 4);
        let x = Matrix::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 10.0]).unwrap();
        let (y, _) = ln.forward(&x).unwrap();
        for r in 0..2 {
            let mean: f64 = y.row(r).iter().map(|v| *v as f64).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
        }
    }
}
