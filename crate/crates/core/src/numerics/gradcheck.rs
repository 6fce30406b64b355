//! Central-difference gradient verification.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::param::Parameter;
use crate::scalar::Scalar;

/// Compare analytic gradients against central finite differences on
/// randomly sampled coordinates; returns the maximum relative error
/// `|analytic - numeric| / (|numeric| + 1e-8)`.
///
/// Contract: the caller has already run one forward+backward pass so
/// the parameters' gradient buffers hold the analytic gradient of the
/// same deterministic loss that `loss_fn` recomputes (dropout disabled
/// or mask-frozen, fixed seed). `loss_fn` must not touch gradients.
/// `params` re-fetches the parameter list from the state so borrows
/// stay scoped.
pub fn finite_difference_check<T>(
    state: &mut T,
    params: impl Fn(&mut T) -> Vec<&mut Parameter<f32>>,
    mut loss_fn: impl FnMut(&mut T) -> Result<f64>,
    eps: f32,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let shapes: Vec<(usize, usize)> = params(state).iter().map(|p| p.shape()).collect();
    let analytic: Vec<Matrix<f32>> = params(state).iter().map(|p| p.grad.clone()).collect();
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if total == 0 {
        return Err(Error::Empty {
            what: "finite_difference_check parameter list".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let flat = rng.random_range(0..total);
        let (pi, ei) = locate(&shapes, flat);

        let original = params(state)[pi].value.data()[ei];
        let plus = original + eps;
        let minus = original - eps;
        // Effective step from the values actually stored, which removes
        // most of the f32 rounding in the perturbation itself.
        let h = plus.wide() - minus.wide();

        params(state)[pi].value.data_mut()[ei] = plus;
        let loss_plus = loss_fn(state)?;
        params(state)[pi].value.data_mut()[ei] = minus;
        let loss_minus = loss_fn(state)?;
        params(state)[pi].value.data_mut()[ei] = original;

        if !loss_plus.is_finite() || !loss_minus.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_difference_check loss at parameter {pi} element {ei}"),
            });
        }
        let numeric = (loss_plus - loss_minus) / h;
        let a = analytic[pi].data()[ei].wide();
        let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn locate(shapes: &[(usize, usize)], mut flat: usize) -> (usize, usize) {
    for (i, (r, c)) in shapes.iter().enumerate() {
        let n = r * c;
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("flat index within total");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // loss = 0.5 * ||W||^2, analytic gradient W.
        struct St {
            w: Parameter<f32>,
        }
        let mut st = St {
            w: Parameter::new(
                "w",
                Matrix::from_vec(2, 3, vec![0.3, -1.2, 0.7, 2.0, -0.1, 0.05]).unwrap(),
            ),
        };
        st.w.grad = st.w.value.clone();
        let max_rel = finite_difference_check(
            &mut st,
            |s| vec![&mut s.w],
            |s| Ok(0.5 * s.w.value.frob_sq()),
            1e-3,
            100,
            7,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }
}
