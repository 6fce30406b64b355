//! Cross-modal retrieval augmentation toolkit.
//!
//! The pipeline has two stages. Stage one aligns image and report
//! embeddings in a shared space, either with a symmetric contrastive
//! loss or with a supervised content loss driven by multi-label disease
//! annotations, and freezes the aligned training set into an exact
//! nearest-neighbour index. Stage two augments a query representation
//! with attention-pooled summaries of its retrieved intra- and
//! inter-modal neighbours and feeds the result to downstream heads:
//! multi-label classification and report retrieval.
//!
//! Everything operates on precomputed embedding records (JSONL plus a
//! TOML manifest), so the full pipeline trains and verifies at desk
//! scale. All numeric kernels are generic over the scalar type through
//! [`Scalar`]; the pipeline itself runs on the `f32` aliases below with
//! 64-bit accumulation in every reduction.

pub mod alignment;
pub mod augment;
mod binio;
pub mod data;
pub mod error;
pub mod index;
pub mod metrics;
pub mod numerics;
pub mod scalar;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Number of disease classes in the label ontology.
pub const NUM_CLASSES: usize = 14;

/// Concrete matrix type used by the pipeline: 32-bit storage,
/// 64-bit accumulation inside reductions.
pub type Mat = numerics::Matrix<f32>;

/// Concrete trainable parameter used by the pipeline.
pub type Param = numerics::Parameter<f32>;

/// Tool version embedded in every artifact for provenance.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
