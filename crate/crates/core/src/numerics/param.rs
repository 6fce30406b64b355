//! Trainable parameters: value plus accumulated gradient.

use rand::Rng;

use crate::error::Result;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// A named trainable tensor with its gradient buffer.
///
/// The gradient always has the value's shape and is zero after
/// [`Parameter::zero_grad`]. Training loops own their parameters
/// exclusively; nothing here is synchronized.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Matrix<S>,
    pub grad: Matrix<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Matrix<S>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros(rows, cols))
    }

    /// Xavier-uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = S::narrow(rng.random_range(-a..a));
        }
        Self::new(name, m)
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = S::zero();
        }
    }

    /// Accumulate `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &Matrix<S>) -> Result<()> {
        self.grad.add_scaled(delta, S::one())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Same values in another scalar type; the gradient starts zeroed.
    pub fn convert<T: Scalar>(&self) -> Parameter<T> {
        Parameter::new(self.name.clone(), self.value.convert())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grad_matches_value_shape_and_resets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p: Parameter<f32> = Parameter::xavier("w", 3, 5, &mut rng);
        assert_eq!(p.grad.shape(), (3, 5));
        let delta = Matrix::from_vec(3, 5, vec![1.0; 15]).unwrap();
        p.accumulate_grad(&delta).unwrap();
        assert!(p.grad.data().iter().all(|&g| g == 1.0));
        p.zero_grad();
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        let a: Parameter<f32> =
            Parameter::xavier("w", 4, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let b: Parameter<f32> =
            Parameter::xavier("w", 4, 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.value, b.value);
    }
}
