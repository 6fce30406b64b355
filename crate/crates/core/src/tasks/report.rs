//! Report retrieval: return the nearest training report for an image.
//!
//! The baseline queries the report index with the aligned image
//! directly. The augmented variant fuses the image with its retrieved
//! neighbours, maps the fused vector back to the aligned width with a
//! learned linear map, and trains that map (plus the fusion blocks)
//! with the symmetric contrastive objective against the paired
//! report's frozen aligned embedding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{clip_contrastive_loss_grad, AlignedVector};
use crate::augment::{augment_backward, augment_with_cache, FusionBlocks, FusionConfig};
use crate::data::{Dataset, EmbeddingRecord, Modality, Split};
use crate::error::{Error, Result};
use crate::index::NeighborSet;
use crate::metrics::{bleu_n, tokenize};
use crate::numerics::layers::Linear;
use crate::numerics::{ops, Adam, Parameter, TrainConfig};
use crate::tasks::{prepare_samples, NeighborMode, PreparedSample, TaskContext, TaskTrainingLog};
use crate::Mat;

/// Fusion blocks plus the learned query map back into aligned space.
#[derive(Debug, Clone)]
pub struct ReportRetrievalModel {
    pub z_enc: usize,
    pub fusion: FusionConfig,
    pub blocks: FusionBlocks,
    /// Maps the fused representation (at fusion output width) to z_enc.
    pub query_map: Linear<f32>,
    pub tau: f64,
    pub alignment_checksum: u64,
    pub index_x_checksum: Option<u64>,
    pub index_r_checksum: Option<u64>,
}

impl ReportRetrievalModel {
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<f32>> {
        let mut p = self.blocks.params_mut();
        p.extend(self.query_map.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Parameter<f32>> {
        let mut p = self.blocks.params();
        p.extend(self.query_map.params());
        p
    }

    /// Fused-and-mapped query in aligned space (unit-normalized).
    pub fn query_vector(&self, sample: &PreparedSample) -> Result<AlignedVector> {
        let (aug, _) = augment_with_cache(
            &sample.query,
            sample.intra.as_ref(),
            sample.inter.as_ref(),
            &self.fusion,
            &self.blocks,
        )?;
        let x = Mat::from_vec(1, aug.values.len(), aug.values)?;
        let (mapped, _) = self.query_map.forward(&x)?;
        AlignedVector::new(mapped.data().to_vec(), Modality::Image)
    }
}

/// Train the augmented report retriever; early stopping minimizes the
/// validation contrastive loss.
pub fn train_report_retriever(
    dataset: &Dataset,
    ctx: &TaskContext<'_>,
    fusion: FusionConfig,
    train: &TrainConfig,
    tau: f64,
) -> Result<(ReportRetrievalModel, TaskTrainingLog)> {
    train.validate()?;
    fusion.validate()?;
    if dataset.split_pairs(Split::Val).is_empty() {
        return Err(Error::Empty {
            what: "val split (required for early stopping)".into(),
        });
    }
    let z = ctx.alignment.z_enc;
    let d_fused = fusion.output_dim(z);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(0x9e9e));
    let mut model = ReportRetrievalModel {
        z_enc: z,
        fusion,
        blocks: FusionBlocks::new(&fusion, z, train.seed)?,
        query_map: Linear::new("query_map", d_fused, z, &mut rng),
        tau,
        alignment_checksum: ctx.alignment.param_checksum(),
        index_x_checksum: ctx.index_x.map(|ix| ix.checksum()),
        index_r_checksum: ctx.index_r.map(|ix| ix.checksum()),
    };

    // Frozen inputs: fused queries retrieve with own-pair exclusion at
    // train time; targets are the paired reports' aligned embeddings.
    let train_samples = prepare_samples(
        ctx,
        dataset,
        Split::Train,
        Some(&model.fusion),
        NeighborMode::Retrieved,
        train.seed,
        true,
    )?;
    let val_samples = prepare_samples(
        ctx,
        dataset,
        Split::Val,
        Some(&model.fusion),
        NeighborMode::Retrieved,
        train.seed.wrapping_add(0x5A17),
        false,
    )?;
    let report_target = |pairs: &[&crate::data::PairedSample]| -> Result<Vec<Vec<f32>>> {
        pairs
            .iter()
            .map(|p| Ok(ctx.alignment.project_eval(&p.report)?.values))
            .collect()
    };
    let train_targets = report_target(&dataset.split_pairs(Split::Train))?;
    let val_targets = report_target(&dataset.split_pairs(Split::Val))?;

    let mut optimizer = Adam::new(train.learning_rate);
    let mut log = TaskTrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_auc: f64::NEG_INFINITY,
        stopped_epoch: 0,
    };
    let mut best = model.clone();
    let mut best_val_loss = f64::INFINITY;

    for epoch in 1..=train.max_epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(
            train.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut order_rng);

        let mut loss_sum = 0.0f64;
        let mut count = 0usize;
        for chunk in order.chunks(train.batch_size.max(2)) {
            if chunk.len() < 2 {
                continue; // a singleton contrastive batch carries no signal
            }
            let loss = retriever_batch(&mut model, &train_samples, &train_targets, chunk)?;
            loss_sum += loss * chunk.len() as f64;
            count += chunk.len();
            optimizer.step(&mut model.params_mut())?;
        }
        let train_loss = loss_sum / count.max(1) as f64;
        let val_loss = retriever_eval_loss(&model, &val_samples, &val_targets)?;
        log.epochs.push(crate::tasks::TaskEpochRecord {
            epoch,
            train_loss,
            val_auc: -val_loss, // log keeps "higher is better"
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            log.best_val_auc = -val_loss;
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

fn retriever_batch(
    model: &mut ReportRetrievalModel,
    samples: &[PreparedSample],
    targets: &[Vec<f32>],
    idx: &[usize],
) -> Result<f64> {
    let z = model.z_enc;
    let d_fused = model.fusion.output_dim(z);
    let mut fused = Vec::with_capacity(idx.len() * d_fused);
    let mut target_rows = Vec::with_capacity(idx.len() * z);
    let mut caches = Vec::with_capacity(idx.len());
    for &i in idx {
        let (aug, cache) = augment_with_cache(
            &samples[i].query,
            samples[i].intra.as_ref(),
            samples[i].inter.as_ref(),
            &model.fusion,
            &model.blocks,
        )?;
        fused.extend_from_slice(&aug.values);
        target_rows.extend_from_slice(&targets[i]);
        caches.push(cache);
    }
    let fused = Mat::from_vec(idx.len(), d_fused, fused)?;
    let target = Mat::from_vec(idx.len(), z, target_rows)?;

    let (mapped, map_cache) = model.query_map.forward(&fused)?;
    let queries = ops::l2_normalize_rows(&mapped);
    let (loss, d_queries, _d_targets) = clip_contrastive_loss_grad(&queries, &target, model.tau)?;
    let d_mapped = ops::l2_normalize_rows_backward(&mapped, &queries, &d_queries)?;
    let d_fused_grad = model.query_map.backward(&map_cache, &d_mapped)?;
    for (row, cache) in caches.iter().enumerate() {
        augment_backward(
            &mut model.blocks,
            cache,
            &model.fusion,
            d_fused_grad.row(row),
            z,
        )?;
    }
    Ok(loss)
}

fn retriever_eval_loss(
    model: &ReportRetrievalModel,
    samples: &[PreparedSample],
    targets: &[Vec<f32>],
) -> Result<f64> {
    let z = model.z_enc;
    let mut queries = Vec::with_capacity(samples.len() * z);
    let mut target_rows = Vec::with_capacity(samples.len() * z);
    for (s, t) in samples.iter().zip(targets.iter()) {
        queries.extend_from_slice(&model.query_vector(s)?.values);
        target_rows.extend_from_slice(t);
    }
    let q = Mat::from_vec(samples.len(), z, queries)?;
    let t = Mat::from_vec(samples.len(), z, target_rows)?;
    crate::alignment::clip_contrastive_loss(&q, &t, model.tau)
}

/// Retrieve the best-matching report for an image. With a trained
/// model the query is the fused-and-mapped representation; without one
/// it is the aligned image itself. Returns the top text plus the full
/// neighbour set for inspection.
pub fn retrieve_report(
    ctx: &TaskContext<'_>,
    record: &EmbeddingRecord,
    model: Option<&ReportRetrievalModel>,
    k: usize,
) -> Result<(String, NeighborSet)> {
    let index_r = ctx.index_r.ok_or_else(|| Error::MissingArtifact {
        what: "report index".into(),
        required_command: "index build --target r".into(),
    })?;
    if index_r.target != crate::index::IndexTarget::R {
        return Err(Error::invalid_parameter(
            "report_index",
            "retrieve_report requires an index with target r",
        ));
    }
    if index_r.is_empty() {
        return Err(Error::Empty {
            what: "report index".into(),
        });
    }
    let query = match model {
        None => ctx.alignment.project_eval(record)?,
        Some(m) => {
            let sample = prepare_query_sample(ctx, record, &m.fusion)?;
            m.query_vector(&sample)?
        }
    };
    let set = index_r.query_aligned(&query, &record.id, k, None)?;
    let text = set.neighbors[0]
        .text
        .clone()
        .ok_or_else(|| Error::validation(&set.neighbors[0].id, "report entry carries no text"))?;
    Ok((text, set))
}

fn prepare_query_sample(
    ctx: &TaskContext<'_>,
    record: &EmbeddingRecord,
    fusion: &FusionConfig,
) -> Result<PreparedSample> {
    let query = ctx.alignment.project_eval(record)?;
    let mut intra = None;
    let mut inter = None;
    if fusion.use_intra {
        let ix = ctx.index_x.ok_or_else(|| Error::MissingArtifact {
            what: "image index required for the intra branch".into(),
            required_command: "index build --target x".into(),
        })?;
        intra = Some(ix.query_aligned(&query, &record.id, fusion.k, None)?);
    }
    if fusion.use_inter {
        let ir = ctx.index_r.ok_or_else(|| Error::MissingArtifact {
            what: "report index required for the inter branch".into(),
            required_command: "index build --target r".into(),
        })?;
        inter = Some(ir.query_aligned(&query, &record.id, fusion.k, None)?);
    }
    Ok(PreparedSample {
        query,
        intra,
        inter,
        labels: vec![0.0; crate::NUM_CLASSES],
        pair_id: record.pair_id.clone(),
    })
}

/// Test-split report retrieval quality: text metrics against the
/// ground-truth paired report plus the label-set exact-match rate.
pub struct ReportEval {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub exact_label_match_rate: f64,
}

pub fn report_retrieval_eval(
    ctx: &TaskContext<'_>,
    dataset: &Dataset,
    model: Option<&ReportRetrievalModel>,
    k: usize,
) -> Result<ReportEval> {
    let pairs = dataset.split_pairs(Split::Test);
    if pairs.is_empty() {
        return Err(Error::Empty {
            what: "test split".into(),
        });
    }
    let mut bleu = [0.0f64; 4];
    let mut rouge = 0.0f64;
    let mut meteor = 0.0f64;
    let mut exact = 0usize;
    for pair in &pairs {
        let (text, set) = retrieve_report(ctx, &pair.image, model, k)?;
        let reference = tokenize(pair.report.text.as_deref().unwrap_or(""));
        let candidate = tokenize(&text);
        for (n, b) in bleu.iter_mut().enumerate() {
            *b += bleu_n(&candidate, &reference, n + 1)?;
        }
        rouge += crate::metrics::rouge_l(&candidate, &reference);
        meteor += crate::metrics::meteor_simplified(&candidate, &reference);
        if set.neighbors[0].labels == pair.labels {
            exact += 1;
        }
    }
    let n = pairs.len() as f64;
    Ok(ReportEval {
        bleu: [bleu[0] / n, bleu[1] / n, bleu[2] / n, bleu[3] / n],
        rouge_l: rouge / n,
        meteor: meteor / n,
        exact_label_match_rate: exact as f64 / n,
    })
}
