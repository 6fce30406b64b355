//! Dense kernels, layers, and reverse-mode gradients for every
//! trainable block in the pipeline.

mod adam;
mod gradcheck;
pub mod layers;
mod matrix;
pub mod ops;
mod param;

pub use adam::Adam;
pub use gradcheck::finite_difference_check;
pub use matrix::{dot_wide, norm_wide, Matrix};
pub use param::Parameter;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forward-pass mode: training enables dropout, evaluation is
/// deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hyperparameters shared by every training loop.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_tolerance: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 60,
            early_stop_tolerance: 3,
            dropout_rate: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid_parameter(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_parameter("batch_size", "must be at least 1"));
        }
        if self.early_stop_tolerance < 1 {
            return Err(Error::invalid_parameter(
                "early_stop_tolerance",
                "must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid_parameter(
                "dropout_rate",
                format!("must lie in [0, 1), got {}", self.dropout_rate),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            dropout_rate: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            early_stop_tolerance: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
