//! Downstream tasks: multi-label classification and report retrieval,
//! with and without retrieval augmentation, plus the cross-dataset
//! regimes and ablation grid.
//!
//! The alignment model and retrieval indices are frozen throughout;
//! only fusion blocks and task heads train. Train-time retrieval
//! excludes the query's own pair to avoid leaking its labels; val and
//! test queries hit a train-only index, so nothing is excluded there.

mod checkpoint;
mod experiment;
mod report;

pub use checkpoint::{load_task_model, save_task_model, TaskKind};
pub use experiment::{
    classification_scores, experiment_from_scores, retrieval_map_avg, retrieval_rankings,
    run_ablations, run_cross_dataset, subsample_train, AblationCell, AblationSpec, Composition,
    CrossDatasetResult, ExperimentResult, Regime, ReportMetrics, RunMetadata, SamplePrediction,
    SourceArtifacts,
};
pub use report::{
    report_retrieval_eval, retrieve_report, train_report_retriever, ReportRetrievalModel,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedVector, AlignmentModel};
use crate::augment::{augment_backward, fused_input, random_neighbors, FusionBlocks, FusionConfig};
use crate::data::{Dataset, EmbeddingRecord, PairedSample, Split};
use crate::error::{Error, Result};
use crate::index::{NeighborSet, RetrievalIndex};
use crate::metrics::ScoredPredictions;
use crate::numerics::layers::{Linear, LinearCache};
use crate::numerics::{ops, Adam, Matrix, Parameter};
use crate::scalar::Scalar;
use crate::{Mat, NUM_CLASSES};

/// Classification head: affine d_in -> 256 -> 14, ReLU then sigmoid.
#[derive(Debug, Clone)]
pub struct ClassifierHead<S: Scalar = f32> {
    pub linear1: Linear<S>,
    pub linear2: Linear<S>,
}

pub struct HeadForward<S: Scalar = f32> {
    c1: LinearCache<S>,
    pre_relu: Matrix<S>,
    c2: LinearCache<S>,
    probs: Matrix<S>,
}

pub const HEAD_HIDDEN: usize = 256;

impl<S: Scalar> ClassifierHead<S> {
    pub fn new(d_in: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear1: Linear::new("head.l1", d_in, HEAD_HIDDEN, rng),
            linear2: Linear::new("head.l2", HEAD_HIDDEN, NUM_CLASSES, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.linear1.weight.value.rows()
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<(Matrix<S>, HeadForward<S>)> {
        let (pre_relu, c1) = self.linear1.forward(x)?;
        let h = ops::relu(&pre_relu);
        let (logits, c2) = self.linear2.forward(&h)?;
        let probs = ops::sigmoid(&logits);
        Ok((
            probs.clone(),
            HeadForward {
                c1,
                pre_relu,
                c2,
                probs,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadForward<S>, d_probs: &Matrix<S>) -> Result<Matrix<S>> {
        let d_logits = ops::sigmoid_backward(&cache.probs, d_probs)?;
        let d_h = self.linear2.backward(&cache.c2, &d_logits)?;
        let d_pre = ops::relu_backward(&cache.pre_relu, &d_h)?;
        self.linear1.backward(&cache.c1, &d_pre)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = self.linear1.params_mut();
        p.extend(self.linear2.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = self.linear1.params();
        p.extend(self.linear2.params());
        p
    }

    pub fn convert<T: Scalar>(&self) -> ClassifierHead<T> {
        ClassifierHead {
            linear1: self.linear1.convert(),
            linear2: self.linear2.convert(),
        }
    }
}

/// Where neighbour sets come from during task training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborMode {
    /// Retrieve from the frozen indices.
    Retrieved,
    /// Uniform random training entries (the control arm).
    Random,
}

/// Frozen artifacts a task model operates on.
#[derive(Clone, Copy)]
pub struct TaskContext<'a> {
    pub alignment: &'a AlignmentModel,
    pub index_x: Option<&'a RetrievalIndex>,
    pub index_r: Option<&'a RetrievalIndex>,
}

impl<'a> TaskContext<'a> {
    pub fn new(
        alignment: &'a AlignmentModel,
        index_x: Option<&'a RetrievalIndex>,
        index_r: Option<&'a RetrievalIndex>,
    ) -> Self {
        Self {
            alignment,
            index_x,
            index_r,
        }
    }
}

/// Trained classification model plus a snapshot of how it was built.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub z_enc: usize,
    /// `None` is the non-augmented baseline on aligned image features.
    pub fusion: Option<FusionConfig>,
    pub blocks: FusionBlocks,
    pub head: ClassifierHead,
    pub neighbor_mode: NeighborMode,
    pub random_seed: u64,
    /// Checksums of the frozen artifacts this model was trained
    /// against; staleness is rejected at use time.
    pub alignment_checksum: u64,
    pub index_x_checksum: Option<u64>,
    pub index_r_checksum: Option<u64>,
}

impl TaskModel {
    pub fn input_dim(&self) -> usize {
        match &self.fusion {
            Some(f) => f.output_dim(self.z_enc),
            None => self.z_enc,
        }
    }

    pub fn check_context(&self, ctx: &TaskContext<'_>) -> Result<()> {
        if ctx.alignment.param_checksum() != self.alignment_checksum {
            return Err(Error::MissingArtifact {
                what: "alignment model does not match the one this task model was trained with"
                    .into(),
                required_command: "align".into(),
            });
        }
        let pairs = [
            (self.index_x_checksum, ctx.index_x, "index build --target x"),
            (self.index_r_checksum, ctx.index_r, "index build --target r"),
        ];
        for (expect, got, cmd) in pairs {
            match (expect, got) {
                (Some(sum), Some(ix)) if ix.checksum() == sum => {}
                (Some(_), _) => {
                    return Err(Error::MissingArtifact {
                        what: "retrieval index missing or stale".into(),
                        required_command: cmd.into(),
                    })
                }
                (None, _) => {}
            }
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<f32>> {
        let mut p = self.blocks.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Parameter<f32>> {
        let mut p = self.blocks.params();
        p.extend(self.head.params());
        p
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskTrainingLog {
    pub epochs: Vec<TaskEpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stopped_epoch: usize,
}

/// Precomputed inputs for one sample: the aligned query plus its
/// per-branch neighbour sets. Retrieval is frozen during task
/// training, so this is computed once, not per epoch.
pub struct PreparedSample {
    pub query: AlignedVector,
    pub intra: Option<NeighborSet>,
    pub inter: Option<NeighborSet>,
    pub labels: Vec<f32>,
    pub pair_id: String,
}

/// Align queries and fetch neighbour sets for every sample of a split.
pub fn prepare_samples(
    ctx: &TaskContext<'_>,
    dataset: &Dataset,
    split: Split,
    fusion: Option<&FusionConfig>,
    neighbor_mode: NeighborMode,
    random_seed: u64,
    exclude_own_pair: bool,
) -> Result<Vec<PreparedSample>> {
    let pairs = dataset.split_pairs(split);
    let mut out = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        out.push(prepare_one(
            ctx,
            pair,
            fusion,
            neighbor_mode,
            random_seed.wrapping_add(i as u64),
            exclude_own_pair,
        )?);
    }
    Ok(out)
}

fn prepare_one(
    ctx: &TaskContext<'_>,
    pair: &PairedSample,
    fusion: Option<&FusionConfig>,
    neighbor_mode: NeighborMode,
    sample_seed: u64,
    exclude_own_pair: bool,
) -> Result<PreparedSample> {
    let query = ctx.alignment.project_eval(&pair.image)?;
    let (mut intra, mut inter) = (None, None);
    if let Some(f) = fusion {
        let exclude = exclude_own_pair.then_some(pair.pair_id.as_str());
        if f.use_intra {
            let ix = ctx.index_x.ok_or_else(|| Error::MissingArtifact {
                what: "image index required for the intra branch".into(),
                required_command: "index build --target x".into(),
            })?;
            intra = Some(match neighbor_mode {
                NeighborMode::Retrieved => {
                    ix.query_aligned(&query, &pair.image.id, f.k, exclude)?
                }
                NeighborMode::Random => random_neighbors(ix, f.k, sample_seed)?,
            });
        }
        if f.use_inter {
            let ir = ctx.index_r.ok_or_else(|| Error::MissingArtifact {
                what: "report index required for the inter branch".into(),
                required_command: "index build --target r".into(),
            })?;
            inter = Some(match neighbor_mode {
                NeighborMode::Retrieved => {
                    ir.query_aligned(&query, &pair.image.id, f.k, exclude)?
                }
                NeighborMode::Random => {
                    random_neighbors(ir, f.k, sample_seed.wrapping_add(0x1234_5678))?
                }
            });
        }
    }
    Ok(PreparedSample {
        query,
        intra,
        inter,
        labels: pair.labels.as_f32(),
        pair_id: pair.pair_id.clone(),
    })
}

/// Model input for one prepared sample; caches are returned for the
/// training backward pass.
fn sample_input(
    sample: &PreparedSample,
    fusion: Option<&FusionConfig>,
    blocks: &FusionBlocks,
) -> Result<(Vec<f32>, Option<crate::augment::AugmentCache>)> {
    match fusion {
        None => Ok((sample.query.values.clone(), None)),
        Some(f) => {
            let (values, cache) = fused_input::<f32>(
                &sample.query.values,
                sample.intra.as_ref(),
                sample.inter.as_ref(),
                f,
                blocks,
            )?;
            Ok((values, Some(cache)))
        }
    }
}

/// Train fusion blocks and the classifier head with BCE; early
/// stopping maximizes validation macro AUC.
pub fn train_classifier(
    dataset: &Dataset,
    ctx: &TaskContext<'_>,
    fusion: Option<FusionConfig>,
    train: &crate::numerics::TrainConfig,
    neighbor_mode: NeighborMode,
) -> Result<(TaskModel, TaskTrainingLog)> {
    train.validate()?;
    if let Some(f) = &fusion {
        f.validate()?;
    }
    if dataset.split_pairs(Split::Val).is_empty() {
        return Err(Error::Empty {
            what: "val split (required for early stopping)".into(),
        });
    }
    let alignment_checksum = ctx.alignment.param_checksum();
    let index_x_checksum = ctx.index_x.map(|ix| ix.checksum());
    let index_r_checksum = ctx.index_r.map(|ix| ix.checksum());

    let z = ctx.alignment.z_enc;
    let input_dim = match &fusion {
        Some(f) => f.output_dim(z),
        None => z,
    };
    let blocks = match &fusion {
        Some(f) => FusionBlocks::new(f, z, train.seed)?,
        None => FusionBlocks {
            intra: None,
            inter: None,
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(0xC1A5));
    let mut model = TaskModel {
        z_enc: z,
        fusion,
        blocks,
        head: ClassifierHead::new(input_dim, &mut rng),
        neighbor_mode,
        random_seed: train.seed,
        alignment_checksum,
        index_x_checksum,
        index_r_checksum,
    };

    let train_samples = prepare_samples(
        ctx,
        dataset,
        Split::Train,
        model.fusion.as_ref(),
        neighbor_mode,
        train.seed,
        true,
    )?;
    let val_samples = prepare_samples(
        ctx,
        dataset,
        Split::Val,
        model.fusion.as_ref(),
        neighbor_mode,
        train.seed.wrapping_add(0x5A17),
        false,
    )?;

    let mut optimizer = Adam::new(train.learning_rate);
    let mut log = TaskTrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_auc: f64::NEG_INFINITY,
        stopped_epoch: 0,
    };
    let mut best = model.clone();

    let order_rng_base = train.seed;
    for epoch in 1..=train.max_epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        use rand::seq::SliceRandom;
        let mut order_rng = ChaCha8Rng::seed_from_u64(
            order_rng_base ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut order_rng);

        let mut loss_sum = 0.0f64;
        let mut count = 0usize;
        for chunk in order.chunks(train.batch_size) {
            let loss = train_batch(&mut model, &train_samples, chunk)?;
            loss_sum += loss * chunk.len() as f64;
            count += chunk.len();
            optimizer.step(&mut model.params_mut())?;
        }
        let train_loss = loss_sum / count.max(1) as f64;
        let val_auc = eval_macro_auc(&model, &val_samples)?;
        log.epochs.push(TaskEpochRecord {
            epoch,
            train_loss,
            val_auc,
        });
        if val_auc > log.best_val_auc {
            log.best_val_auc = val_auc;
            log.best_epoch = epoch;
            best = model.clone();
        }
        log.stopped_epoch = epoch;
        if epoch - log.best_epoch >= train.early_stop_tolerance {
            break;
        }
    }
    Ok((best, log))
}

fn train_batch(model: &mut TaskModel, samples: &[PreparedSample], idx: &[usize]) -> Result<f64> {
    let d_in = model.input_dim();
    let mut inputs = Vec::with_capacity(idx.len() * d_in);
    let mut targets = Vec::with_capacity(idx.len() * NUM_CLASSES);
    let mut caches = Vec::with_capacity(idx.len());
    let fusion = model.fusion;
    for &i in idx {
        let (values, cache) = sample_input(&samples[i], fusion.as_ref(), &model.blocks)?;
        inputs.extend_from_slice(&values);
        targets.extend_from_slice(&samples[i].labels);
        caches.push(cache);
    }
    let x = Mat::from_vec(idx.len(), d_in, inputs)?;
    let y = Mat::from_vec(idx.len(), NUM_CLASSES, targets)?;
    let (probs, fwd) = model.head.forward(&x)?;
    let (loss, d_probs) = ops::binary_cross_entropy(&probs, &y)?;
    let d_input = model.head.backward(&fwd, &d_probs)?;
    if let Some(f) = fusion.as_ref() {
        for (row, cache) in caches.iter().enumerate() {
            if let Some(cache) = cache {
                augment_backward(
                    &mut model.blocks,
                    cache,
                    f,
                    d_input.row(row),
                    model.z_enc,
                )?;
            }
        }
    }
    Ok(loss)
}

/// Eval-mode scores for prepared samples.
pub fn score_samples(model: &TaskModel, samples: &[PreparedSample]) -> Result<ScoredPredictions> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let (values, _) = sample_input(s, model.fusion.as_ref(), &model.blocks)?;
        let x = Mat::from_vec(1, values.len(), values)?;
        let (probs, _) = model.head.forward(&x)?;
        scores.push(probs.data().iter().map(|&v| v as f64).collect());
        let labels: Vec<u8> = s.labels.iter().map(|&v| v as u8).collect();
        targets.push(crate::data::Labels::from_slice(&labels)?);
    }
    Ok(ScoredPredictions { scores, targets })
}

fn eval_macro_auc(model: &TaskModel, samples: &[PreparedSample]) -> Result<f64> {
    score_samples(model, samples)?.macro_auc()
}

/// Deterministic eval-mode classification of a single image record,
/// including retrieval and fusion.
pub fn classify(
    model: &TaskModel,
    ctx: &TaskContext<'_>,
    record: &EmbeddingRecord,
) -> Result<Vec<f32>> {
    model.check_context(ctx)?;
    let query = ctx.alignment.project_eval(record)?;
    let (mut intra, mut inter) = (None, None);
    if let Some(f) = &model.fusion {
        if f.use_intra {
            let ix = ctx.index_x.ok_or_else(|| Error::MissingArtifact {
                what: "image index required for the intra branch".into(),
                required_command: "index build --target x".into(),
            })?;
            intra = Some(match model.neighbor_mode {
                NeighborMode::Retrieved => ix.query_aligned(&query, &record.id, f.k, None)?,
                NeighborMode::Random => random_neighbors(ix, f.k, model.random_seed)?,
            });
        }
        if f.use_inter {
            let ir = ctx.index_r.ok_or_else(|| Error::MissingArtifact {
                what: "report index required for the inter branch".into(),
                required_command: "index build --target r".into(),
            })?;
            inter = Some(match model.neighbor_mode {
                NeighborMode::Retrieved => ir.query_aligned(&query, &record.id, f.k, None)?,
                NeighborMode::Random => {
                    random_neighbors(ir, f.k, model.random_seed.wrapping_add(0x1234_5678))?
                }
            });
        }
    }
    let sample = PreparedSample {
        query,
        intra,
        inter,
        labels: vec![0.0; NUM_CLASSES],
        pair_id: record.pair_id.clone(),
    };
    let (values, _) = sample_input(&sample, model.fusion.as_ref(), &model.blocks)?;
    let x = Mat::from_vec(1, values.len(), values)?;
    let (probs, _) = model.head.forward(&x)?;
    Ok(probs.data().to_vec())
}
