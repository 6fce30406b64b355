//! Alignment training loop with early stopping on validation loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    clip_contrastive_loss, clip_contrastive_loss_grad, content_loss, content_loss_grad,
    AlignConfig, AlignmentModel, LossMode,
};
use crate::data::{iterate_batches, Dataset, PairedSample, Split};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Mode};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
}

/// Train the alignment model and return the snapshot with the best
/// validation loss, stopping after `early_stop_tolerance` epochs
/// without improvement.
pub fn train_alignment(dataset: &Dataset, config: &AlignConfig) -> Result<(AlignmentModel, TrainingLog)> {
    let model = AlignmentModel::new(
        dataset.z_enc,
        config.tau,
        config.train.dropout_rate,
        config.train.seed,
    )?;
    continue_training(model, dataset, config)
}

/// Run the training loop starting from an existing model; used both by
/// fresh training and by the cross-dataset fine-tuning regime.
pub fn continue_training(
    mut model: AlignmentModel,
    dataset: &Dataset,
    config: &AlignConfig,
) -> Result<(AlignmentModel, TrainingLog)> {
    config.validate()?;
    if dataset.split_pairs(Split::Train).is_empty() {
        return Err(Error::Empty {
            what: "train split".into(),
        });
    }
    if dataset.split_pairs(Split::Val).is_empty() {
        return Err(Error::Empty {
            what: "val split (required for early stopping)".into(),
        });
    }

    let mut optimizer = Adam::new(config.train.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.train.seed.wrapping_add(0x5EED));

    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_epoch: 0,
    };
    let mut best_model = model.clone();

    for epoch in 1..=config.train.max_epochs {
        let mut train_loss_sum = 0.0f64;
        let mut train_count = 0usize;
        for batch in iterate_batches(
            dataset,
            Split::Train,
            config.train.batch_size,
            config.train.seed,
            epoch,
        ) {
            let loss = train_step(&mut model, &batch, config, &mut dropout_rng)?;
            train_loss_sum += loss * batch.len() as f64;
            train_count += batch.len();
            optimizer.step(&mut model.params_mut())?;
        }
        let train_loss = train_loss_sum / train_count.max(1) as f64;
        let val_loss = evaluate_loss(&model, dataset, Split::Val, config)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best_model = model.clone();
        }
        log.stopped_epoch = epoch;
        if epoch - log.best_epoch >= config.train.early_stop_tolerance {
            break;
        }
    }
    Ok((best_model, log))
}

fn train_step(
    model: &mut AlignmentModel,
    batch: &[&PairedSample],
    config: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    match (config.combo_lambda, config.loss_mode) {
        (Some(lambda), _) => {
            let clip = clip_step(model, batch, config, rng)?;
            let content = content_loss_grad(model, batch, Mode::Train, rng, lambda)?;
            Ok(clip + lambda * content)
        }
        (None, LossMode::ClipOnly) => clip_step(model, batch, config, rng),
        (None, LossMode::Content) => content_loss_grad(model, batch, Mode::Train, rng, 1.0),
    }
}

fn clip_step(
    model: &mut AlignmentModel,
    batch: &[&PairedSample],
    config: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let images: Vec<_> = batch.iter().map(|p| &p.image).collect();
    let reports: Vec<_> = batch.iter().map(|p| &p.report).collect();
    let x = crate::alignment::batch_matrix(&images, model.z_enc)?;
    let r = crate::alignment::batch_matrix(&reports, model.z_enc)?;
    let (zx, cache_x) = model.image_head.forward(&x, Mode::Train, rng)?;
    let (zr, cache_r) = model.report_head.forward(&r, Mode::Train, rng)?;
    let (loss, dzx, dzr) = clip_contrastive_loss_grad(&zx, &zr, config.tau)?;
    model.image_head.backward(&cache_x, &dzx)?;
    model.report_head.backward(&cache_r, &dzr)?;
    Ok(loss)
}

/// Eval-mode loss of the active objective over a whole split.
pub fn evaluate_loss(
    model: &AlignmentModel,
    dataset: &Dataset,
    split: Split,
    config: &AlignConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    // Epoch 0 batching: deterministic and independent of training.
    for batch in iterate_batches(dataset, split, config.train.batch_size, 0, 0) {
        let loss = match (config.combo_lambda, config.loss_mode) {
            (Some(lambda), _) => {
                eval_clip(model, &batch, config, &mut rng)? + lambda * content_loss(model, &batch)?
            }
            (None, LossMode::ClipOnly) => eval_clip(model, &batch, config, &mut rng)?,
            (None, LossMode::Content) => content_loss(model, &batch)?,
        };
        sum += loss * batch.len() as f64;
        count += batch.len();
    }
    if count == 0 {
        return Err(Error::Empty {
            what: format!("{split:?} split"),
        });
    }
    Ok(sum / count as f64)
}

fn eval_clip(
    model: &AlignmentModel,
    batch: &[&PairedSample],
    config: &AlignConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let images: Vec<_> = batch.iter().map(|p| &p.image).collect();
    let reports: Vec<_> = batch.iter().map(|p| &p.report).collect();
    let x = crate::alignment::batch_matrix(&images, model.z_enc)?;
    let r = crate::alignment::batch_matrix(&reports, model.z_enc)?;
    let (zx, _) = model.image_head.forward(&x, Mode::Eval, rng)?;
    let (zr, _) = model.report_head.forward(&r, Mode::Eval, rng)?;
    clip_contrastive_loss(&zx, &zr, config.tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::numerics::TrainConfig;

    fn tiny_dataset() -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_pairs: 40,
            z_enc: 16,
            ..Default::default()
        })
        .unwrap()
    }

    fn fast_config(mode: LossMode) -> AlignConfig {
        AlignConfig {
            train: TrainConfig {
                max_epochs: 4,
                batch_size: 16,
                ..Default::default()
            },
            loss_mode: mode,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = fast_config(LossMode::Content);
        let (_, log_a) = train_alignment(&ds, &cfg).unwrap();
        let (_, log_b) = train_alignment(&ds, &cfg).unwrap();
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn missing_val_split_is_rejected() {
        let mut ds = tiny_dataset();
        ds.pairs.retain(|p| p.split() != Split::Val);
        let err = train_alignment(&ds, &fast_config(LossMode::ClipOnly))
            .unwrap_err()
            .to_string();
        assert!(err.contains("val split"), "{err}");
    }

    #[test]
    fn early_stopping_epoch_arithmetic() {
        // With tolerance t and the best epoch at e, training runs e + t
        // epochs. Force "best at epoch 1" by making later epochs no
        // better: tolerance 3, plenty of max epochs, tiny dataset with a
        // huge learning rate so validation rapidly degrades.
        let ds = tiny_dataset();
        let cfg = AlignConfig {
            train: TrainConfig {
                max_epochs: 50,
                batch_size: 8,
                learning_rate: 5.0,
                early_stop_tolerance: 3,
                ..Default::default()
            },
            loss_mode: LossMode::Content,
            ..Default::default()
        };
        let (_, log) = train_alignment(&ds, &cfg).unwrap();
        assert_eq!(log.stopped_epoch, log.best_epoch + 3);
    }

    #[test]
    fn content_training_reduces_loss() {
        let ds = generate_synthetic(&SyntheticConfig {
            n_pairs: 120,
            z_enc: 16,
            ..Default::default()
        })
        .unwrap();
        let cfg = AlignConfig {
            train: TrainConfig {
                max_epochs: 12,
                batch_size: 32,
                dropout_rate: 0.1,
                ..Default::default()
            },
            loss_mode: LossMode::Content,
            ..Default::default()
        };
        let (_, log) = train_alignment(&ds, &cfg).unwrap();
        let first = log.epochs.first().unwrap().train_loss;
        let last = log.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }
}
