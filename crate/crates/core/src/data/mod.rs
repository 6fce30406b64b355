//! Paired embedding datasets: ingestion, validation, synthesis.

mod batches;
mod jsonl;
mod synthetic;

pub use batches::iterate_batches;
pub use jsonl::{load_dataset, load_jsonl, save_dataset, Manifest, Provenance};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// The 14-class chest disease ontology, in fixed column order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 14-element multi-hot label vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Labels(pub [u8; NUM_CLASSES]);

impl Labels {
    pub fn from_slice(v: &[u8]) -> Result<Self> {
        if v.len() != NUM_CLASSES {
            return Err(Error::validation(
                "<labels>",
                format!("labels length {} != {NUM_CLASSES}", v.len()),
            ));
        }
        let mut a = [0u8; NUM_CLASSES];
        a.copy_from_slice(v);
        Ok(Self(a))
    }

    pub fn from_classes(classes: &[usize]) -> Self {
        let mut a = [0u8; NUM_CLASSES];
        for &c in classes {
            a[c] = 1;
        }
        Self(a)
    }

    #[inline]
    pub fn is_active(&self, class: usize) -> bool {
        self.0[class] == 1
    }

    pub fn active_classes(&self) -> Vec<usize> {
        (0..NUM_CLASSES).filter(|&c| self.is_active(c)).collect()
    }

    pub fn count_active(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    /// Packed bitmask with bit `c` set iff class `c` is active.
    pub fn to_mask(&self) -> u16 {
        self.0
            .iter()
            .enumerate()
            .fold(0u16, |m, (c, &v)| if v == 1 { m | (1 << c) } else { m })
    }

    pub fn from_mask(mask: u16) -> Self {
        let mut a = [0u8; NUM_CLASSES];
        for (c, v) in a.iter_mut().enumerate() {
            *v = ((mask >> c) & 1) as u8;
        }
        Self(a)
    }

    /// Does any class overlap with `other`?
    pub fn shares_class(&self, other: &Labels) -> bool {
        self.to_mask() & other.to_mask() != 0
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&v| v > 1) {
            return Err(Error::validation(
                "<labels>",
                "labels entries must be 0 or 1",
            ));
        }
        Ok(())
    }
}

/// One modality instance of a pair: a precomputed encoder embedding
/// plus its annotations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub pair_id: String,
    pub modality: Modality,
    pub vector: Vec<f32>,
    pub labels: Labels,
    pub text: Option<String>,
    pub split: Split,
}

impl EmbeddingRecord {
    pub fn validate(&self, z_enc: usize) -> Result<()> {
        if self.vector.len() != z_enc {
            return Err(Error::validation(
                &self.id,
                format!("vector length {} != z_enc {z_enc}", self.vector.len()),
            ));
        }
        if let Some(bad) = self.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                &self.id,
                format!("non-finite vector element at {bad}"),
            ));
        }
        self.labels
            .validate()
            .map_err(|_| Error::validation(&self.id, "labels entries must be 0 or 1"))?;
        if self.modality == Modality::Report {
            match &self.text {
                Some(t) if !t.is_empty() => {}
                _ => {
                    return Err(Error::validation(
                        &self.id,
                        "report records must carry non-empty text",
                    ))
                }
            }
        }
        Ok(())
    }
}

/// An (image, report) pair sharing labels and split.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub pair_id: String,
    pub image: EmbeddingRecord,
    pub report: EmbeddingRecord,
    pub labels: Labels,
}

impl PairedSample {
    pub fn split(&self) -> Split {
        self.image.split
    }

    pub fn validate(&self, z_enc: usize) -> Result<()> {
        self.image.validate(z_enc)?;
        self.report.validate(z_enc)?;
        if self.image.modality != Modality::Image || self.report.modality != Modality::Report {
            return Err(Error::validation(&self.pair_id, "pair modalities mislabelled"));
        }
        if self.image.labels != self.labels || self.report.labels != self.labels {
            return Err(Error::validation(
                &self.pair_id,
                "image and report labels must agree with the pair labels",
            ));
        }
        if self.image.split != self.report.split {
            return Err(Error::validation(
                &self.pair_id,
                "image and report split tags must agree",
            ));
        }
        Ok(())
    }
}

/// A validated collection of paired samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub pairs: Vec<PairedSample>,
    pub class_names: Vec<String>,
    pub z_enc: usize,
}

impl Dataset {
    /// Validate all invariants: unique ids, uniform dimensions, agreeing
    /// labels/splits, and non-empty TRAIN and TEST splits.
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Empty {
                what: "dataset (no records)".into(),
            });
        }
        if self.class_names.len() != NUM_CLASSES {
            return Err(Error::validation(
                &self.name,
                format!("class_names length {} != {NUM_CLASSES}", self.class_names.len()),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for pair in &self.pairs {
            pair.validate(self.z_enc)?;
            for id in [&pair.image.id, &pair.report.id] {
                if !seen.insert(id.clone()) {
                    return Err(Error::IdCollision { id: id.clone() });
                }
            }
            if !seen.insert(format!("pair:{}", pair.pair_id)) {
                return Err(Error::IdCollision {
                    id: pair.pair_id.clone(),
                });
            }
        }
        for split in [Split::Train, Split::Test] {
            if self.split_pairs(split).is_empty() {
                return Err(Error::Empty {
                    what: format!("{split:?} split"),
                });
            }
        }
        Ok(())
    }

    pub fn split_pairs(&self, split: Split) -> Vec<&PairedSample> {
        self.pairs.iter().filter(|p| p.split() == split).collect()
    }

    pub fn find_record(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.pairs.iter().find_map(|p| {
            if p.image.id == id {
                Some(&p.image)
            } else if p.report.id == id {
                Some(&p.report)
            } else {
                None
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_mask_roundtrip() {
        let l = Labels::from_classes(&[0, 5, 13]);
        assert_eq!(Labels::from_mask(l.to_mask()), l);
        assert_eq!(l.count_active(), 3);
        assert!(l.shares_class(&Labels::from_classes(&[5])));
        assert!(!l.shares_class(&Labels::from_classes(&[1, 2])));
    }

    #[test]
    fn labels_length_checked() {
        let err = Labels::from_slice(&[0u8; 13]).unwrap_err().to_string();
        assert!(err.contains("labels length 13 != 14"), "{err}");
    }
}
