//! Stage one: per-modality projection heads and the content classifier
//! that pull image and report embeddings into a shared, content-aligned
//! space.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, save_training_log};
pub use loss::{clip_contrastive_loss, clip_contrastive_loss_grad, content_loss, content_loss_grad};
pub use train::{continue_training, evaluate_loss, train_alignment, EpochRecord, TrainingLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingRecord, Modality};
use crate::error::{Error, Result};
use crate::numerics::layers::{
    dropout_backward, dropout_forward, LayerNorm, LayerNormCache, Linear, LinearCache,
};
use crate::numerics::{ops, Matrix, Mode, Parameter, TrainConfig};
use crate::scalar::Scalar;
use crate::{Mat, NUM_CLASSES};

/// Widen pipeline (f32) values into the working scalar type.
pub fn widen_slice<S: Scalar>(v: &[f32]) -> Vec<S> {
    v.iter().map(|&x| S::narrow(x as f64)).collect()
}

/// Default softmax temperature for the contrastive objective.
pub const DEFAULT_TAU: f64 = 0.07;

/// Which alignment objective to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Symmetric contrastive loss over paired batches.
    ClipOnly,
    /// Supervised content loss through the shared classifier.
    Content,
}

/// Alignment training options.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub train: TrainConfig,
    pub loss_mode: LossMode,
    pub tau: f64,
    /// When set, the total loss becomes `clip + lambda * content`
    /// regardless of `loss_mode`. Off by default.
    pub combo_lambda: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            loss_mode: LossMode::Content,
            tau: DEFAULT_TAU,
            combo_lambda: None,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid_parameter(
                "tau",
                format!("must be a positive finite real, got {}", self.tau),
            ));
        }
        Ok(())
    }
}

/// Unit-normalized embedding in the aligned space.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedVector {
    pub values: Vec<f32>,
    pub source_modality: Modality,
}

impl AlignedVector {
    /// Normalize `values` to unit length.
    pub fn new(values: Vec<f32>, source_modality: Modality) -> Result<Self> {
        let m = Mat::from_vec(1, values.len(), values)?;
        let normed = ops::l2_normalize_rows(&m);
        Ok(Self {
            values: normed.data().to_vec(),
            source_modality,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Two-layer ReLU MLP with dropout and layer normalization; output is
/// L2-normalized by [`AlignmentModel::project`].
///
/// Order: linear -> relu -> dropout -> layer norm -> linear.
#[derive(Debug, Clone)]
pub struct ProjectionHead<S: Scalar = f32> {
    pub linear1: Linear<S>,
    pub norm: LayerNorm<S>,
    pub linear2: Linear<S>,
    pub dropout_rate: f64,
}

pub struct HeadCache<S: Scalar = f32> {
    c1: LinearCache<S>,
    pre_relu: Matrix<S>,
    mask: Option<Matrix<S>>,
    ln: LayerNormCache<S>,
    c2: LinearCache<S>,
    /// Pre-normalization output and its normalized form.
    pre_norm: Matrix<S>,
    normed: Matrix<S>,
}

impl<S: Scalar> ProjectionHead<S> {
    pub fn new(name: &str, z_enc: usize, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear1: Linear::new(&format!("{name}.l1"), z_enc, z_enc, rng),
            norm: LayerNorm::new(&format!("{name}.ln"), z_enc),
            linear2: Linear::new(&format!("{name}.l2"), z_enc, z_enc, rng),
            dropout_rate,
        }
    }

    /// Forward a batch of raw embeddings to unit-normalized aligned
    /// rows.
    pub fn forward(
        &self,
        x: &Matrix<S>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Matrix<S>, HeadCache<S>)> {
        let (pre_relu, c1) = self.linear1.forward(x)?;
        let activated = ops::relu(&pre_relu);
        let (dropped, mask) =
            dropout_forward(&activated, self.dropout_rate, mode == Mode::Train, rng);
        let (normed_in, ln) = self.norm.forward(&dropped)?;
        let (pre_norm, c2) = self.linear2.forward(&normed_in)?;
        let normed = ops::l2_normalize_rows(&pre_norm);
        Ok((
            normed.clone(),
            HeadCache {
                c1,
                pre_relu,
                mask,
                ln,
                c2,
                pre_norm,
                normed,
            },
        ))
    }

    /// Accumulate parameter gradients from the gradient of the
    /// unit-normalized output; returns the input gradient.
    pub fn backward(&mut self, cache: &HeadCache<S>, d_out: &Matrix<S>) -> Result<Matrix<S>> {
        let d_pre_norm = ops::l2_normalize_rows_backward(&cache.pre_norm, &cache.normed, d_out)?;
        let d_ln_out = self.linear2.backward(&cache.c2, &d_pre_norm)?;
        let d_dropped = self.norm.backward(&cache.ln, &d_ln_out)?;
        let d_activated = dropout_backward(&d_dropped, &cache.mask);
        let d_pre_relu = ops::relu_backward(&cache.pre_relu, &d_activated)?;
        self.linear1.backward(&cache.c1, &d_pre_relu)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.linear1.params_mut();
        p.extend(self.norm.params_mut());
        p.extend(self.linear2.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.linear1.params();
        p.extend(self.norm.params());
        p.extend(self.linear2.params());
        p
    }

    pub fn convert<T: Scalar>(&self) -> ProjectionHead<T> {
        ProjectionHead {
            linear1: self.linear1.convert(),
            norm: self.norm.convert(),
            linear2: self.linear2.convert(),
            dropout_rate: self.dropout_rate,
        }
    }
}

pub const CLASSIFIER_HIDDEN: usize = 256;

/// Three affine layers z_enc -> z_enc -> 256 -> 14; ReLU after the
/// first two, sigmoid after the last. Output lies in (0,1)^14.
#[derive(Debug, Clone)]
pub struct ContentClassifier<S: Scalar = f32> {
    pub linear1: Linear<S>,
    pub linear2: Linear<S>,
    pub linear3: Linear<S>,
}

pub struct ClassifierCache<S: Scalar = f32> {
    c1: LinearCache<S>,
    pre_relu1: Matrix<S>,
    c2: LinearCache<S>,
    pre_relu2: Matrix<S>,
    c3: LinearCache<S>,
    probs: Matrix<S>,
}

impl<S: Scalar> ContentClassifier<S> {
    pub fn new(z_enc: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear1: Linear::new("classifier.l1", z_enc, z_enc, rng),
            linear2: Linear::new("classifier.l2", z_enc, CLASSIFIER_HIDDEN, rng),
            linear3: Linear::new("classifier.l3", CLASSIFIER_HIDDEN, NUM_CLASSES, rng),
        }
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<(Matrix<S>, ClassifierCache<S>)> {
        let (pre_relu1, c1) = self.linear1.forward(x)?;
        let h1 = ops::relu(&pre_relu1);
        let (pre_relu2, c2) = self.linear2.forward(&h1)?;
        let h2 = ops::relu(&pre_relu2);
        let (logits, c3) = self.linear3.forward(&h2)?;
        let probs = ops::sigmoid(&logits);
        Ok((
            probs.clone(),
            ClassifierCache {
                c1,
                pre_relu1,
                c2,
                pre_relu2,
                c3,
                probs,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ClassifierCache<S>, d_probs: &Matrix<S>) -> Result<Matrix<S>> {
        let d_logits = ops::sigmoid_backward(&cache.probs, d_probs)?;
        let d_h2 = self.linear3.backward(&cache.c3, &d_logits)?;
        let d_pre2 = ops::relu_backward(&cache.pre_relu2, &d_h2)?;
        let d_h1 = self.linear2.backward(&cache.c2, &d_pre2)?;
        let d_pre1 = ops::relu_backward(&cache.pre_relu1, &d_h1)?;
        self.linear1.backward(&cache.c1, &d_pre1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.linear1.params_mut();
        p.extend(self.linear2.params_mut());
        p.extend(self.linear3.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.linear1.params();
        p.extend(self.linear2.params());
        p.extend(self.linear3.params());
        p
    }

    pub fn convert<T: Scalar>(&self) -> ContentClassifier<T> {
        ContentClassifier {
            linear1: self.linear1.convert(),
            linear2: self.linear2.convert(),
            linear3: self.linear3.convert(),
        }
    }
}

/// The full stage-one model: one projection head per modality, a joint
/// map for the paired member, the shared content classifier, and the
/// contrastive temperature.
#[derive(Debug, Clone)]
pub struct AlignmentModel<S: Scalar = f32> {
    pub z_enc: usize,
    pub tau: f64,
    pub image_head: ProjectionHead<S>,
    pub report_head: ProjectionHead<S>,
    /// Maps concat(z_image, z_report) (2 z_enc wide) back to z_enc.
    pub joint_map: Linear<S>,
    pub classifier: ContentClassifier<S>,
}

impl<S: Scalar> AlignmentModel<S> {
    pub fn new(z_enc: usize, tau: f64, dropout_rate: f64, seed: u64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid_parameter(
                "tau",
                format!("must be a positive finite real, got {tau}"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            z_enc,
            tau,
            image_head: ProjectionHead::new("image_head", z_enc, dropout_rate, &mut rng),
            report_head: ProjectionHead::new("report_head", z_enc, dropout_rate, &mut rng),
            joint_map: Linear::new("joint_map", 2 * z_enc, z_enc, &mut rng),
            classifier: ContentClassifier::new(z_enc, &mut rng),
        })
    }

    pub fn head(&self, modality: Modality) -> &ProjectionHead<S> {
        match modality {
            Modality::Image => &self.image_head,
            Modality::Report => &self.report_head,
        }
    }

    /// All trainable parameters in a fixed, stable order.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.image_head.params_mut();
        p.extend(self.report_head.params_mut());
        p.extend(self.joint_map.params_mut());
        p.extend(self.classifier.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.image_head.params();
        p.extend(self.report_head.params());
        p.extend(self.joint_map.params());
        p.extend(self.classifier.params());
        p
    }

    pub fn convert<T: Scalar>(&self) -> AlignmentModel<T> {
        AlignmentModel {
            z_enc: self.z_enc,
            tau: self.tau,
            image_head: self.image_head.convert(),
            report_head: self.report_head.convert(),
            joint_map: self.joint_map.convert(),
            classifier: self.classifier.convert(),
        }
    }
}

impl AlignmentModel {
    /// Project one record into the aligned space. Eval mode is
    /// deterministic; train mode draws a dropout mask from `rng`.
    pub fn project(
        &self,
        record: &EmbeddingRecord,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<AlignedVector> {
        if record.vector.len() != self.z_enc {
            return Err(Error::ShapeMismatch {
                op: "project",
                left_rows: 1,
                left_cols: record.vector.len(),
                right_rows: 1,
                right_cols: self.z_enc,
            });
        }
        let x = Mat::from_vec(1, self.z_enc, record.vector.clone())?;
        let (out, _) = self.head(record.modality).forward(&x, mode, rng)?;
        AlignedVector::new(out.data().to_vec(), record.modality)
    }

    /// Deterministic eval-mode projection.
    pub fn project_eval(&self, record: &EmbeddingRecord) -> Result<AlignedVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.project(record, Mode::Eval, &mut rng)
    }

    /// Stable checksum over all parameter bytes; used to assert that
    /// frozen components stay bit-identical.
    pub fn param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        for p in self.params() {
            for v in p.value.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
        h
    }
}

/// How records enter the aligned space: through a trained model or the
/// identity (unit-normalized raw vectors), the untrained baseline.
#[derive(Clone, Copy)]
pub enum Embedder<'a> {
    Identity,
    Model(&'a AlignmentModel),
}

impl Embedder<'_> {
    pub fn embed(&self, record: &EmbeddingRecord) -> Result<AlignedVector> {
        match self {
            Embedder::Identity => AlignedVector::new(record.vector.clone(), record.modality),
            Embedder::Model(m) => m.project_eval(record),
        }
    }
}

/// Stack record vectors into a batch matrix, one row per record.
pub fn batch_matrix<S: Scalar>(records: &[&EmbeddingRecord], z_enc: usize) -> Result<Matrix<S>> {
    let mut data = Vec::with_capacity(records.len() * z_enc);
    for r in records {
        if r.vector.len() != z_enc {
            return Err(Error::validation(
                &r.id,
                format!("vector length {} != z_enc {z_enc}", r.vector.len()),
            ));
        }
        data.extend(widen_slice::<S>(&r.vector));
    }
    Matrix::from_vec(records.len(), z_enc, data)
}

/// Concatenate two equal-height batches side by side.
pub fn hconcat<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "hconcat",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let mut data = Vec::with_capacity(a.rows() * (a.cols() + b.cols()));
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Matrix::from_vec(a.rows(), a.cols() + b.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::numerics::norm_wide;

    fn sample_record() -> EmbeddingRecord {
        let ds = generate_synthetic(&SyntheticConfig {
            n_pairs: 10,
            z_enc: 16,
            ..Default::default()
        })
        .unwrap();
        ds.pairs[0].image.clone()
    }

    #[test]
    fn project_eval_is_deterministic_and_unit_norm() {
        let model = AlignmentModel::new(16, DEFAULT_TAU, 0.5, 3).unwrap();
        let rec = sample_record();
        let a = model.project_eval(&rec).unwrap();
        let b = model.project_eval(&rec).unwrap();
        assert_eq!(a, b);
        let n = norm_wide(&a.values);
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zeroed_final_layer_projects_to_normalized_bias() {
        let mut model = AlignmentModel::new(16, DEFAULT_TAU, 0.5, 3).unwrap();
        for w in model.image_head.linear2.weight.value.data_mut() {
            *w = 0.0;
        }
        let mut bias = vec![0.0f32; 16];
        bias[2] = 3.0;
        bias[5] = -4.0;
        model.image_head.linear2.bias.value = Mat::from_vec(1, 16, bias).unwrap();
        let rec = sample_record();
        let out = model.project_eval(&rec).unwrap();
        assert!((out.values[2] - 0.6).abs() < 1e-6);
        assert!((out.values[5] + 0.8).abs() < 1e-6);
        for (i, v) in out.values.iter().enumerate() {
            if i != 2 && i != 5 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn project_rejects_wrong_dimension() {
        let model = AlignmentModel::new(8, DEFAULT_TAU, 0.5, 0).unwrap();
        let rec = sample_record(); // z_enc 16
        assert!(model.project_eval(&rec).is_err());
    }

    #[test]
    fn checksum_tracks_parameter_changes() {
        let model = AlignmentModel::new(16, DEFAULT_TAU, 0.5, 3).unwrap();
        let before = model.param_checksum();
        let mut altered = model.clone();
        altered.joint_map.bias.value.set(0, 0, 1.0);
        assert_ne!(before, altered.param_checksum());
        assert_eq!(before, model.param_checksum());
    }
}
