//! Plain Adam optimizer.

use crate::error::Result;
use crate::numerics::matrix::Matrix;
use crate::numerics::param::Parameter;
use crate::scalar::Scalar;

/// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8. State is keyed by
/// parameter position, so the caller must pass parameters in the same
/// order on every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<Matrix<f64>>,
    second_moment: Vec<Matrix<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Parameter<S>]) -> Result<()> {
        if self.first_moment.is_empty() {
            for p in params.iter() {
                let (r, c) = p.shape();
                self.first_moment.push(Matrix::zeros(r, c));
                self.second_moment.push(Matrix::zeros(r, c));
            }
        }
        assert_eq!(
            self.first_moment.len(),
            params.len(),
            "parameter list changed between optimizer steps"
        );
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, val) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad.data()[j].wide();
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let upd = val.wide() - self.learning_rate * mhat / (vhat.sqrt() + self.eps);
                *val = S::narrow(upd);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize 0.5 * ||w||^2; gradient is w itself.
        let mut p: Parameter<f32> =
            Parameter::new("w", Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = Adam::new(0.05);
        for _ in 0..400 {
            p.grad = p.value.clone();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!(p.value.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p: Parameter<f32> =
                Parameter::new("w", Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap());
            let mut opt = Adam::new(0.01);
            for i in 0..50 {
                p.grad = p.value.map(|v| v * (0.5 + (i as f32) * 0.01));
                opt.step(&mut [&mut p]).unwrap();
            }
            p.value.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
