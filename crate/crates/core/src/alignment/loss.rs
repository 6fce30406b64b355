//! Alignment objectives: symmetric contrastive loss and the supervised
//! content loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{hconcat, widen_slice, AlignmentModel};
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::numerics::{ops, Matrix, Mode};
use crate::scalar::Scalar;

/// Symmetric contrastive loss over row-aligned unit-vector batches.
///
/// With `S = Zx Zr^T` (cosine, since rows are unit), the loss is the
/// mean over both retrieval directions and all rows of
/// `-log softmax(S/tau)` at the matching index. Non-negative; exactly 0
/// for a single pair.
pub fn clip_contrastive_loss<S: Scalar>(zx: &Matrix<S>, zr: &Matrix<S>, tau: f64) -> Result<f64> {
    contrastive_core(zx, zr, tau, false).map(|(l, _, _)| l)
}

/// Loss plus gradients with respect to both batches.
pub fn clip_contrastive_loss_grad<S: Scalar>(
    zx: &Matrix<S>,
    zr: &Matrix<S>,
    tau: f64,
) -> Result<(f64, Matrix<S>, Matrix<S>)> {
    contrastive_core(zx, zr, tau, true).map(|(l, gx, gr)| {
        (l, gx.expect("grad requested"), gr.expect("grad requested"))
    })
}

fn contrastive_core<S: Scalar>(
    zx: &Matrix<S>,
    zr: &Matrix<S>,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Matrix<S>>, Option<Matrix<S>>)> {
    zx.check_same_shape(zr, "clip_contrastive_loss")?;
    let n = zx.rows();
    if n == 0 {
        return Err(Error::Empty {
            what: "contrastive batch".into(),
        });
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid_parameter(
            "tau",
            format!("must be a positive finite real, got {tau}"),
        ));
    }

    // Scaled similarity logits in f64.
    let mut logits = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            logits[i * n + j] = crate::numerics::dot_wide(zx.row(i), zr.row(j)) / tau;
        }
    }

    // Row direction: image i against all reports. Column direction:
    // report j against all images. Loss at the diagonal, mean over 2n.
    let mut loss = 0.0f64;
    let mut p_row = vec![0.0f64; n * n];
    let mut p_col = vec![0.0f64; n * n];
    for i in 0..n {
        loss += log_sum_exp(&logits[i * n..(i + 1) * n]) - logits[i * n + i];
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits[i * n + j]).collect();
        loss += log_sum_exp(&col) - logits[j * n + j];
    }
    loss /= 2.0 * n as f64;

    if !want_grad {
        return Ok((loss, None, None));
    }

    for i in 0..n {
        softmax_into(&logits[i * n..(i + 1) * n], &mut p_row[i * n..(i + 1) * n]);
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits[i * n + j]).collect();
        let mut out = vec![0.0f64; n];
        softmax_into(&col, &mut out);
        for i in 0..n {
            p_col[i * n + j] = out[i];
        }
    }

    // dL/dS_ij = (p_row_ij - d_ij + p_col_ij - d_ij) / (2 n tau)
    let scale = 1.0 / (2.0 * n as f64 * tau);
    let mut ds = Matrix::<S>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 2.0 } else { 0.0 };
            ds.set(
                i,
                j,
                S::narrow((p_row[i * n + j] + p_col[i * n + j] - delta) * scale),
            );
        }
    }
    let dzx = ops::matmul(&ds, zr)?;
    let dzr = ops::matmul(&ds.transpose(), zx)?;
    Ok((loss, Some(dzx), Some(dzr)))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(v: &[f64], out: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(v.iter()) {
        *o = (x - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Supervised content loss: mean binary cross-entropy of the shared
/// classifier over the three members {image, report, joint} of a
/// paired batch. Eval-mode forward only.
pub fn content_loss<S: Scalar>(model: &AlignmentModel<S>, batch: &[&PairedSample]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scratch = model.clone();
    content_loss_inner(&mut scratch, batch, Mode::Eval, &mut rng, None)
}

/// Training form: forward in `mode`, then accumulate gradients into the
/// model's heads, joint map, and classifier. `loss_scale` multiplies
/// the gradient (used by the combined-objective ablation).
pub fn content_loss_grad<S: Scalar>(
    model: &mut AlignmentModel<S>,
    batch: &[&PairedSample],
    mode: Mode,
    rng: &mut ChaCha8Rng,
    loss_scale: f64,
) -> Result<f64> {
    content_loss_inner(model, batch, mode, rng, Some(loss_scale))
}

fn content_loss_inner<S: Scalar>(
    model: &mut AlignmentModel<S>,
    batch: &[&PairedSample],
    mode: Mode,
    rng: &mut ChaCha8Rng,
    grad_scale: Option<f64>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty {
            what: "content loss batch".into(),
        });
    }
    let images: Vec<_> = batch.iter().map(|p| &p.image).collect();
    let reports: Vec<_> = batch.iter().map(|p| &p.report).collect();
    let x = crate::alignment::batch_matrix(&images, model.z_enc)?;
    let r = crate::alignment::batch_matrix(&reports, model.z_enc)?;

    let (zx, cache_x) = model.image_head.forward(&x, mode, rng)?;
    let (zr, cache_r) = model.report_head.forward(&r, mode, rng)?;
    let joined = hconcat(&zx, &zr)?;
    let (zj, cache_j) = model.joint_map.forward(&joined)?;

    // Stack the three members into one classifier batch.
    let b = batch.len();
    let z = model.z_enc;
    let mut stacked = Vec::with_capacity(3 * b * z);
    stacked.extend_from_slice(zx.data());
    stacked.extend_from_slice(zr.data());
    stacked.extend_from_slice(zj.data());
    let c_in = Matrix::from_vec(3 * b, z, stacked)?;

    let (probs, cache_c) = model.classifier.forward(&c_in)?;
    let mut targets = Vec::with_capacity(3 * b * crate::NUM_CLASSES);
    for _ in 0..3 {
        for p in batch {
            targets.extend(widen_slice::<S>(&p.labels.as_f32()));
        }
    }
    let targets = Matrix::from_vec(3 * b, crate::NUM_CLASSES, targets)?;
    let (loss, mut d_probs) = ops::binary_cross_entropy(&probs, &targets)?;

    let Some(scale) = grad_scale else {
        return Ok(loss);
    };
    if scale != 1.0 {
        d_probs = d_probs.scale(S::narrow(scale));
    }

    let d_cin = model.classifier.backward(&cache_c, &d_probs)?;
    let (d_zx_c, d_zr_c, d_zj) = split3(&d_cin, b, z)?;
    let d_joined = model.joint_map.backward(&cache_j, &d_zj)?;
    let (d_zx_j, d_zr_j) = split2(&d_joined, z)?;

    let d_zx = d_zx_c.add(&d_zx_j)?;
    let d_zr = d_zr_c.add(&d_zr_j)?;
    model.image_head.backward(&cache_x, &d_zx)?;
    model.report_head.backward(&cache_r, &d_zr)?;
    Ok(loss)
}

fn split3<S: Scalar>(m: &Matrix<S>, b: usize, z: usize) -> Result<(Matrix<S>, Matrix<S>, Matrix<S>)> {
    let rows = m.data();
    let take = |k: usize| Matrix::from_vec(b, z, rows[k * b * z..(k + 1) * b * z].to_vec());
    Ok((take(0)?, take(1)?, take(2)?))
}

fn split2<S: Scalar>(m: &Matrix<S>, z: usize) -> Result<(Matrix<S>, Matrix<S>)> {
    let b = m.rows();
    let mut left = Vec::with_capacity(b * z);
    let mut right = Vec::with_capacity(b * z);
    for r in 0..b {
        let row = m.row(r);
        left.extend_from_slice(&row[..z]);
        right.extend_from_slice(&row[z..]);
    }
    Ok((Matrix::from_vec(b, z, left)?, Matrix::from_vec(b, z, right)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::DEFAULT_TAU;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::numerics::ops::l2_normalize_rows;
    use crate::Mat;
    use rand::SeedableRng;

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let zx = l2_normalize_rows(&Mat::from_vec(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let zr = l2_normalize_rows(&Mat::from_vec(1, 4, vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        assert_eq!(clip_contrastive_loss(&zx, &zr, 1.0).unwrap(), 0.0);
        assert_eq!(clip_contrastive_loss(&zx, &zr, DEFAULT_TAU).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_two_pair_closed_form() {
        // Both modalities equal the orthonormal basis: loss = ln(1 + e^-1).
        let z = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = clip_contrastive_loss(&z, &z, 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-6, "loss {loss}, expect {expect}");
    }

    #[test]
    fn loss_invariant_under_pair_permutation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut data = Vec::new();
        for _ in 0..(8 * 6) {
            data.push(rand::Rng::random_range(&mut rng, -1.0f32..1.0));
        }
        let zx = l2_normalize_rows(&Mat::from_vec(8, 6, data.clone()).unwrap());
        let mut data_r = Vec::new();
        for _ in 0..(8 * 6) {
            data_r.push(rand::Rng::random_range(&mut rng, -1.0f32..1.0));
        }
        let zr = l2_normalize_rows(&Mat::from_vec(8, 6, data_r).unwrap());
        let base = clip_contrastive_loss(&zx, &zr, DEFAULT_TAU).unwrap();

        let perm = [3usize, 0, 7, 1, 5, 2, 6, 4];
        let permute = |m: &Mat| {
            let mut out = Mat::zeros(8, 6);
            for (to, &from) in perm.iter().enumerate() {
                for c in 0..6 {
                    out.set(to, c, m.get(from, c));
                }
            }
            out
        };
        let permuted = clip_contrastive_loss(&permute(&zx), &permute(&zr), DEFAULT_TAU).unwrap();
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn contrastive_loss_nonnegative_property() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for n in [1usize, 2, 5, 9] {
            let mut dx = Vec::new();
            let mut dr = Vec::new();
            for _ in 0..(n * 8) {
                dx.push(rand::Rng::random_range(&mut rng, -1.0f32..1.0));
                dr.push(rand::Rng::random_range(&mut rng, -1.0f32..1.0));
            }
            let zx = l2_normalize_rows(&Mat::from_vec(n, 8, dx).unwrap());
            let zr = l2_normalize_rows(&Mat::from_vec(n, 8, dr).unwrap());
            let loss = clip_contrastive_loss(&zx, &zr, 0.3).unwrap();
            assert!(loss >= 0.0, "n={n} loss {loss}");
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let z = Mat::zeros(0, 4);
        assert!(clip_contrastive_loss(&z, &z, 1.0).is_err());
    }

    #[test]
    fn content_loss_uniform_half_classifier() {
        // Zeroed classifier output layer -> sigmoid(0) = 0.5 everywhere,
        // so the loss is ln 2 regardless of targets.
        let ds = generate_synthetic(&SyntheticConfig {
            n_pairs: 12,
            z_enc: 16,
            ..Default::default()
        })
        .unwrap();
        let mut model = crate::alignment::AlignmentModel::new(16, DEFAULT_TAU, 0.5, 1).unwrap();
        for w in model.classifier.linear3.weight.value.data_mut() {
            *w = 0.0;
        }
        let batch: Vec<&PairedSample> = ds.pairs.iter().take(6).collect();
        let loss = content_loss(&model, &batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9, "loss {loss}");
    }
}
