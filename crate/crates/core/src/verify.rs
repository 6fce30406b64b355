//! Gradient-verification harnesses: wire each trainable block to its
//! loss and run the central-difference check. The analytic gradient
//! comes from the production (f32) backward pass; the numeric oracle
//! re-evaluates the loss on an f64 twin of the same parameters so the
//! difference quotient is not drowned by f32 forward rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    clip_contrastive_loss, clip_contrastive_loss_grad, content_loss, content_loss_grad,
    widen_slice, AlignmentModel, ProjectionHead,
};
use crate::augment::{
    augment_backward, fused_input, FusionBlocks, FusionConfig, FusionStrategy,
};
use crate::data::{generate_synthetic, Labels, Modality, PairedSample, SyntheticConfig};
use crate::error::Result;
use crate::index::{Neighbor, NeighborSet};
use crate::numerics::{finite_difference_check, ops, Matrix, Mode, Parameter};
use crate::tasks::{ClassifierHead, PreparedSample};
use crate::{Mat, NUM_CLASSES};

pub const FD_EPS: f32 = 1e-3;

fn random_batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Mat::from_vec(rows, cols, data).expect("finite random data")
}

/// Projection heads driving the symmetric contrastive loss.
pub fn grad_check_projection_contrastive(
    z_enc: usize,
    batch: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    struct St {
        image_head: ProjectionHead,
        report_head: ProjectionHead,
        x: Mat,
        r: Mat,
        tau: f64,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = St {
        image_head: ProjectionHead::new("image_head", z_enc, 0.0, &mut rng),
        report_head: ProjectionHead::new("report_head", z_enc, 0.0, &mut rng),
        x: random_batch(batch, z_enc, &mut rng),
        r: random_batch(batch, z_enc, &mut rng),
        tau: 0.3,
    };

    // One analytic backward pass on the production path (eval mode).
    {
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let (zx, cx) = st.image_head.forward(&st.x, Mode::Eval, &mut drng)?;
        let (zr, cr) = st.report_head.forward(&st.r, Mode::Eval, &mut drng)?;
        let (_, dzx, dzr) = clip_contrastive_loss_grad(&zx, &zr, st.tau)?;
        st.image_head.backward(&cx, &dzx)?;
        st.report_head.backward(&cr, &dzr)?;
    }

    finite_difference_check(
        &mut st,
        |s| {
            let mut p = s.image_head.params_mut();
            p.extend(s.report_head.params_mut());
            p
        },
        |s| {
            let image64 = s.image_head.convert::<f64>();
            let report64 = s.report_head.convert::<f64>();
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let (zx, _) = image64.forward(&s.x.convert(), Mode::Eval, &mut drng)?;
            let (zr, _) = report64.forward(&s.r.convert(), Mode::Eval, &mut drng)?;
            clip_contrastive_loss(&zx, &zr, s.tau)
        },
        FD_EPS,
        samples,
        seed ^ 0xFD,
    )
}

/// Full alignment model (heads, joint map, classifier) driving the
/// supervised content loss.
pub fn grad_check_content(z_enc: usize, batch: usize, samples: usize, seed: u64) -> Result<f64> {
    struct St {
        model: AlignmentModel,
        dataset: crate::data::Dataset,
        batch: usize,
    }
    let dataset = generate_synthetic(&SyntheticConfig {
        n_pairs: batch.max(10),
        z_enc,
        noise_sigma: 0.2,
        seed,
        ..Default::default()
    })?;
    let mut st = St {
        model: AlignmentModel::new(z_enc, 0.07, 0.0, seed)?,
        dataset,
        batch,
    };

    {
        let pairs: Vec<&PairedSample> = st.dataset.pairs.iter().take(st.batch).collect();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        content_loss_grad(&mut st.model, &pairs, Mode::Eval, &mut drng, 1.0)?;
    }

    finite_difference_check(
        &mut st,
        |s| s.model.params_mut(),
        |s| {
            let pairs: Vec<&PairedSample> = s.dataset.pairs.iter().take(s.batch).collect();
            let model64 = s.model.convert::<f64>();
            content_loss(&model64, &pairs)
        },
        FD_EPS,
        samples,
        seed ^ 0xFD,
    )
}

/// Both attention branches plus the classification head driving BCE.
pub fn grad_check_mha_bce(
    z_enc: usize,
    n_heads: usize,
    k: usize,
    batch: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    struct St {
        blocks: FusionBlocks,
        head: ClassifierHead,
        fusion: FusionConfig,
        samples: Vec<PreparedSample>,
        targets: Mat,
    }

    let fusion = FusionConfig {
        strategy: FusionStrategy::Mha,
        use_intra: true,
        use_inter: true,
        k,
        n_heads,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = FusionBlocks::new(&fusion, z_enc, seed)?;
    // Randomize the output projections; zero-init would silence the
    // q/k/v gradients entirely.
    for block in [blocks.intra.as_mut(), blocks.inter.as_mut()].into_iter().flatten() {
        block.w_out = Parameter::xavier(block.w_out.name.clone(), z_enc, z_enc, &mut rng);
    }

    let mut make_set = |rng: &mut ChaCha8Rng| -> NeighborSet {
        let neighbors = (0..k)
            .map(|i| {
                let v: Vec<f32> = (0..z_enc).map(|_| rng.random_range(-1.0..1.0)).collect();
                let unit = ops::l2_normalize_rows(&Mat::from_vec(1, z_enc, v).unwrap());
                Neighbor {
                    id: format!("n{i}"),
                    pair_id: format!("p{i}"),
                    similarity: 1.0 - i as f64 * 0.01,
                    vector: unit.data().to_vec(),
                    labels: Labels::from_classes(&[i % NUM_CLASSES]),
                    text: None,
                    modality: Modality::Image,
                    source: 0,
                }
            })
            .collect();
        NeighborSet {
            query_id: None,
            neighbors,
            k,
        }
    };

    let mut prepared = Vec::with_capacity(batch);
    let mut target_rows = Vec::with_capacity(batch * NUM_CLASSES);
    for b in 0..batch {
        let qv: Vec<f32> = (0..z_enc).map(|_| rng.random_range(-1.0..1.0)).collect();
        let query = crate::alignment::AlignedVector::new(qv, Modality::Image)?;
        let intra = make_set(&mut rng);
        let inter = make_set(&mut rng);
        prepared.push(PreparedSample {
            query,
            intra: Some(intra),
            inter: Some(inter),
            labels: vec![0.0; NUM_CLASSES],
            pair_id: format!("q{b}"),
        });
        for c in 0..NUM_CLASSES {
            target_rows.push(if rng.random_range(0.0..1.0) < 0.3 || c == b % NUM_CLASSES {
                1.0
            } else {
                0.0
            });
        }
    }
    let d_in = fusion.output_dim(z_enc);
    let mut st = St {
        blocks,
        head: ClassifierHead::new(d_in, &mut rng),
        fusion,
        samples: prepared,
        targets: Mat::from_vec(batch, NUM_CLASSES, target_rows)?,
    };

    // Analytic pass on the production f32 path.
    {
        let d_in = st.fusion.output_dim(z_enc);
        let mut inputs = Vec::with_capacity(st.samples.len() * d_in);
        let mut caches = Vec::with_capacity(st.samples.len());
        for sample in &st.samples {
            let (values, cache) = fused_input::<f32>(
                &sample.query.values,
                sample.intra.as_ref(),
                sample.inter.as_ref(),
                &st.fusion,
                &st.blocks,
            )?;
            inputs.extend_from_slice(&values);
            caches.push(cache);
        }
        let x = Mat::from_vec(st.samples.len(), d_in, inputs)?;
        let (probs, fwd) = st.head.forward(&x)?;
        let (_, d_probs) = ops::binary_cross_entropy(&probs, &st.targets)?;
        let d_input = st.head.backward(&fwd, &d_probs)?;
        let fusion = st.fusion;
        for (row, cache) in caches.iter().enumerate() {
            augment_backward(&mut st.blocks, cache, &fusion, d_input.row(row), z_enc)?;
        }
    }

    finite_difference_check(
        &mut st,
        |s| {
            let mut p = s.blocks.params_mut();
            p.extend(s.head.params_mut());
            p
        },
        |s| {
            let blocks64 = s.blocks.convert::<f64>();
            let head64 = s.head.convert::<f64>();
            let d_in = s.fusion.output_dim(z_enc);
            let mut inputs: Vec<f64> = Vec::with_capacity(s.samples.len() * d_in);
            for sample in &s.samples {
                let (values, _) = fused_input::<f64>(
                    &sample.query.values,
                    sample.intra.as_ref(),
                    sample.inter.as_ref(),
                    &s.fusion,
                    &blocks64,
                )?;
                inputs.extend_from_slice(&values);
            }
            let x = Matrix::from_vec(s.samples.len(), d_in, inputs)?;
            let (probs, _) = head64.forward(&x)?;
            let targets64: Matrix<f64> = s.targets.convert();
            let (loss, _) = ops::binary_cross_entropy(&probs, &targets64)?;
            Ok(loss)
        },
        FD_EPS,
        samples,
        seed ^ 0xFD,
    )
}

/// Quadratic sanity case: loss = 0.5 ||W||^2, gradient exactly W.
pub fn grad_check_quadratic(rows: usize, cols: usize, samples: usize, seed: u64) -> Result<f64> {
    struct St {
        w: Parameter<f32>,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = St {
        w: Parameter::xavier("w", rows, cols, &mut rng),
    };
    st.w.grad = st.w.value.clone();
    finite_difference_check(
        &mut st,
        |s| vec![&mut s.w],
        |s| Ok(0.5 * s.w.value.frob_sq()),
        FD_EPS,
        samples,
        seed ^ 0xFD,
    )
}

/// Widen pipeline labels into an f64 target row; test helper shared
/// with the acceptance suite.
pub fn labels_to_row(labels: &Labels) -> Vec<f64> {
    widen_slice::<f64>(&labels.as_f32())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradients_are_exact() {
        let err = grad_check_quadratic(4, 6, 100, 2).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn projection_contrastive_gradients() {
        let err = grad_check_projection_contrastive(12, 6, 100, 11).unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn content_loss_gradients() {
        let err = grad_check_content(12, 8, 100, 5).unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn mha_bce_gradients() {
        let err = grad_check_mha_bce(16, 4, 5, 4, 100, 3).unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
    }
}
