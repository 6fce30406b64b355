//! Stage two: fuse a query with its retrieved neighbours.
//!
//! The default strategy attends over each neighbour set with its own
//! multi-head attention block and concatenates the query with the
//! attended summaries; plain concatenation of raw neighbour vectors is
//! kept as the simple baseline. The attention output projection starts
//! at zero, so an untrained fusion is exactly "query plus zeros" and
//! training can keep ignoring retrieval if it carries no signal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{widen_slice, AlignedVector};
use crate::error::{Error, Result};
use crate::index::{NeighborSet, RetrievalIndex};
use crate::numerics::{ops, Matrix, Parameter};
use crate::scalar::Scalar;
use crate::Mat;

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_K: usize = 10;

/// Fusion strategy for neighbour integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Concat,
    Mha,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub use_intra: bool,
    pub use_inter: bool,
    pub k: usize,
    pub n_heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Mha,
            use_intra: true,
            use_inter: true,
            k: DEFAULT_K,
            n_heads: DEFAULT_HEADS,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_intra && !self.use_inter {
            return Err(Error::invalid_parameter(
                "fusion",
                "at least one of use_intra/use_inter must be enabled",
            ));
        }
        if self.k == 0 {
            return Err(Error::invalid_parameter("k", "must be at least 1"));
        }
        Ok(())
    }

    /// Output dimension for a query of width `z_enc`.
    pub fn output_dim(&self, z_enc: usize) -> usize {
        let branches = self.use_intra as usize + self.use_inter as usize;
        match self.strategy {
            FusionStrategy::Mha => z_enc * (1 + branches),
            FusionStrategy::Concat => z_enc * (1 + branches * self.k),
        }
    }
}

/// One attention block: per-head query/key/value projections of shape
/// z_enc x (z_enc / n_heads) and an output projection z_enc x z_enc.
/// The output projection is zero-initialized.
#[derive(Debug, Clone)]
pub struct MhaBlock<S: Scalar = f32> {
    pub z_enc: usize,
    pub n_heads: usize,
    pub w_query: Vec<Parameter<S>>,
    pub w_key: Vec<Parameter<S>>,
    pub w_value: Vec<Parameter<S>>,
    pub w_out: Parameter<S>,
}

pub struct MhaCache<S: Scalar = f32> {
    query: Matrix<S>,
    neighbors: Matrix<S>,
    per_head: Vec<HeadAttn<S>>,
    concat: Matrix<S>,
}

struct HeadAttn<S: Scalar> {
    keys: Matrix<S>,
    values: Matrix<S>,
    q: Matrix<S>,
    attn: Matrix<S>,
}

impl<S: Scalar> MhaBlock<S> {
    pub fn new(name: &str, z_enc: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || z_enc % n_heads != 0 {
            return Err(Error::invalid_parameter(
                "n_heads",
                format!("z_enc {z_enc} must be divisible by n_heads {n_heads}"),
            ));
        }
        let d = z_enc / n_heads;
        let make = |tag: &str, h: usize, rng: &mut ChaCha8Rng| {
            Parameter::xavier(format!("{name}.h{h}.{tag}"), z_enc, d, rng)
        };
        let mut w_query = Vec::new();
        let mut w_key = Vec::new();
        let mut w_value = Vec::new();
        for h in 0..n_heads {
            w_query.push(make("wq", h, rng));
            w_key.push(make("wk", h, rng));
            w_value.push(make("wv", h, rng));
        }
        Ok(Self {
            z_enc,
            n_heads,
            w_query,
            w_key,
            w_value,
            w_out: Parameter::zeros(format!("{name}.wo"), z_enc, z_enc),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.z_enc / self.n_heads
    }

    /// Attend the query over the neighbour rows; returns the fused
    /// vector and the cache for backward.
    pub fn forward(&self, query: &Matrix<S>, neighbors: &Matrix<S>) -> Result<(Matrix<S>, MhaCache<S>)> {
        if neighbors.rows() == 0 {
            return Err(Error::Empty {
                what: "neighbor set (attention)".into(),
            });
        }
        if query.cols() != self.z_enc || neighbors.cols() != self.z_enc {
            return Err(Error::ShapeMismatch {
                op: "mha_forward",
                left_rows: query.rows(),
                left_cols: query.cols(),
                right_rows: neighbors.rows(),
                right_cols: neighbors.cols(),
            });
        }
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut per_head = Vec::with_capacity(self.n_heads);
        let mut concat_data = Vec::with_capacity(self.z_enc);
        for h in 0..self.n_heads {
            let q = ops::matmul(query, &self.w_query[h].value)?;
            let keys = ops::matmul(neighbors, &self.w_key[h].value)?;
            let values = ops::matmul(neighbors, &self.w_value[h].value)?;
            let mut scores = ops::matmul(&q, &keys.transpose())?;
            for s in scores.data_mut() {
                *s = S::narrow(s.wide() * scale);
            }
            let attn = ops::softmax_rows(&scores, 1.0)?;
            let head_out = ops::matmul(&attn, &values)?;
            concat_data.extend_from_slice(head_out.data());
            per_head.push(HeadAttn {
                keys,
                values,
                q,
                attn,
            });
        }
        let concat = Matrix::from_vec(1, self.z_enc, concat_data)?;
        let out = ops::matmul(&concat, &self.w_out.value)?;
        Ok((
            out,
            MhaCache {
                query: query.clone(),
                neighbors: neighbors.clone(),
                per_head,
                concat,
            },
        ))
    }

    /// Accumulate parameter gradients from the output gradient. Query
    /// and neighbour vectors are frozen inputs, so their gradients are
    /// not propagated.
    pub fn backward(&mut self, cache: &MhaCache<S>, d_out: &Matrix<S>) -> Result<()> {
        let d = self.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let d_wout = ops::matmul(&cache.concat.transpose(), d_out)?;
        self.w_out.accumulate_grad(&d_wout)?;
        let d_concat = ops::matmul(d_out, &self.w_out.value.transpose())?;

        for h in 0..self.n_heads {
            let head = &cache.per_head[h];
            let d_head = Matrix::from_vec(1, d, d_concat.row(0)[h * d..(h + 1) * d].to_vec())?;
            let d_attn = ops::matmul(&d_head, &head.values.transpose())?;
            let d_values = ops::matmul(&head.attn.transpose(), &d_head)?;
            let mut d_scores = ops::softmax_rows_backward(&head.attn, &d_attn, 1.0)?;
            for s in d_scores.data_mut() {
                *s = S::narrow(s.wide() * scale);
            }
            let d_q = ops::matmul(&d_scores, &head.keys)?;
            let d_keys = ops::matmul(&d_scores.transpose(), &head.q)?;

            let d_wq = ops::matmul(&cache.query.transpose(), &d_q)?;
            self.w_query[h].accumulate_grad(&d_wq)?;
            let d_wk = ops::matmul(&cache.neighbors.transpose(), &d_keys)?;
            self.w_key[h].accumulate_grad(&d_wk)?;
            let d_wv = ops::matmul(&cache.neighbors.transpose(), &d_values)?;
            self.w_value[h].accumulate_grad(&d_wv)?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        self.w_query
            .iter_mut()
            .chain(self.w_key.iter_mut())
            .chain(self.w_value.iter_mut())
            .chain(std::iter::once(&mut self.w_out))
            .collect()
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p: Vec<&Parameter<S>> = self.w_query.iter().collect();
        p.extend(self.w_key.iter());
        p.extend(self.w_value.iter());
        p.push(&self.w_out);
        p
    }

    pub fn convert<T: Scalar>(&self) -> MhaBlock<T> {
        MhaBlock {
            z_enc: self.z_enc,
            n_heads: self.n_heads,
            w_query: self.w_query.iter().map(|p| p.convert()).collect(),
            w_key: self.w_key.iter().map(|p| p.convert()).collect(),
            w_value: self.w_value.iter().map(|p| p.convert()).collect(),
            w_out: self.w_out.convert(),
        }
    }
}

/// Attention-fuse a query with one neighbour set.
pub fn mha_fuse(
    block: &MhaBlock,
    query: &AlignedVector,
    neighbors: &NeighborSet,
) -> Result<Vec<f32>> {
    let q = Mat::from_vec(1, query.dim(), query.values.clone())?;
    let n = neighbors.matrix()?;
    let (out, _) = block.forward(&q, &n)?;
    Ok(out.data().to_vec())
}

/// The fused representation: `(x ‖ attended-or-raw neighbour blocks)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRepresentation {
    pub values: Vec<f32>,
    pub z_enc: usize,
    pub strategy: FusionStrategy,
}

/// Per-branch attention blocks; present only for enabled branches
/// under the MHA strategy.
#[derive(Debug, Clone)]
pub struct FusionBlocks<S: Scalar = f32> {
    pub intra: Option<MhaBlock<S>>,
    pub inter: Option<MhaBlock<S>>,
}

impl<S: Scalar> FusionBlocks<S> {
    pub fn new(config: &FusionConfig, z_enc: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.strategy == FusionStrategy::Concat {
            return Ok(Self {
                intra: None,
                inter: None,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intra = if config.use_intra {
            Some(MhaBlock::new("mha_intra", z_enc, config.n_heads, &mut rng)?)
        } else {
            None
        };
        let inter = if config.use_inter {
            Some(MhaBlock::new("mha_inter", z_enc, config.n_heads, &mut rng)?)
        } else {
            None
        };
        Ok(Self { intra, inter })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut p = Vec::new();
        if let Some(b) = self.intra.as_mut() {
            p.extend(b.params_mut());
        }
        if let Some(b) = self.inter.as_mut() {
            p.extend(b.params_mut());
        }
        p
    }

    pub fn params(&self) -> Vec<&Parameter<S>> {
        let mut p = Vec::new();
        if let Some(b) = self.intra.as_ref() {
            p.extend(b.params());
        }
        if let Some(b) = self.inter.as_ref() {
            p.extend(b.params());
        }
        p
    }

    pub fn convert<T: Scalar>(&self) -> FusionBlocks<T> {
        FusionBlocks {
            intra: self.intra.as_ref().map(|b| b.convert()),
            inter: self.inter.as_ref().map(|b| b.convert()),
        }
    }
}

pub struct AugmentCache<S: Scalar = f32> {
    pub intra: Option<MhaCache<S>>,
    pub inter: Option<MhaCache<S>>,
}

/// Build the augmented representation from a query and its neighbour
/// sets. Branch-enabled sets must be present.
pub fn augment(
    query: &AlignedVector,
    intra: Option<&NeighborSet>,
    inter: Option<&NeighborSet>,
    config: &FusionConfig,
    blocks: &FusionBlocks,
) -> Result<AugmentedRepresentation> {
    augment_with_cache(query, intra, inter, config, blocks).map(|(a, _)| a)
}

pub fn augment_with_cache(
    query: &AlignedVector,
    intra: Option<&NeighborSet>,
    inter: Option<&NeighborSet>,
    config: &FusionConfig,
    blocks: &FusionBlocks,
) -> Result<(AugmentedRepresentation, AugmentCache)> {
    let (values, cache) = fused_input(&query.values, intra, inter, config, blocks)?;
    Ok((
        AugmentedRepresentation {
            values,
            z_enc: query.dim(),
            strategy: config.strategy,
        },
        cache,
    ))
}

/// Scalar-generic fusion core: pipeline inputs stay f32, the working
/// type is the blocks' scalar.
pub fn fused_input<S: Scalar>(
    query_values: &[f32],
    intra: Option<&NeighborSet>,
    inter: Option<&NeighborSet>,
    config: &FusionConfig,
    blocks: &FusionBlocks<S>,
) -> Result<(Vec<S>, AugmentCache<S>)> {
    config.validate()?;
    let z = query_values.len();
    let mut values = Vec::with_capacity(config.output_dim(z));
    values.extend(widen_slice::<S>(query_values));
    let mut cache = AugmentCache {
        intra: None,
        inter: None,
    };

    let branch = |enabled: bool,
                  set: Option<&NeighborSet>,
                  block: Option<&MhaBlock<S>>,
                  slot: &mut Option<MhaCache<S>>,
                  values: &mut Vec<S>|
     -> Result<()> {
        if !enabled {
            return Ok(());
        }
        let set = set.ok_or_else(|| {
            Error::invalid_parameter("neighbors", "branch enabled but neighbour set missing")
        })?;
        match config.strategy {
            FusionStrategy::Concat => {
                for n in &set.neighbors {
                    values.extend(widen_slice::<S>(&n.vector));
                }
            }
            FusionStrategy::Mha => {
                let block = block.ok_or_else(|| {
                    Error::invalid_parameter("fusion", "missing attention block for branch")
                })?;
                let q = Matrix::from_vec(1, z, widen_slice::<S>(query_values))?;
                let n = set.matrix()?.convert::<S>();
                let (out, c) = block.forward(&q, &n)?;
                values.extend_from_slice(out.data());
                *slot = Some(c);
            }
        }
        Ok(())
    };

    branch(
        config.use_intra,
        intra,
        blocks.intra.as_ref(),
        &mut cache.intra,
        &mut values,
    )?;
    branch(
        config.use_inter,
        inter,
        blocks.inter.as_ref(),
        &mut cache.inter,
        &mut values,
    )?;
    Ok((values, cache))
}

/// Backpropagate through the MHA branches of an augmented
/// representation; the query segment's gradient is discarded (the
/// aligned query is frozen).
pub fn augment_backward<S: Scalar>(
    blocks: &mut FusionBlocks<S>,
    cache: &AugmentCache<S>,
    config: &FusionConfig,
    d_values: &[S],
    z_enc: usize,
) -> Result<()> {
    if config.strategy != FusionStrategy::Mha {
        return Ok(());
    }
    let mut offset = z_enc; // skip the query segment
    if config.use_intra {
        let d = Matrix::from_vec(1, z_enc, d_values[offset..offset + z_enc].to_vec())?;
        let block = blocks.intra.as_mut().expect("intra block exists");
        let c = cache.intra.as_ref().expect("intra cache exists");
        block.backward(c, &d)?;
        offset += z_enc;
    }
    if config.use_inter {
        let d = Matrix::from_vec(1, z_enc, d_values[offset..offset + z_enc].to_vec())?;
        let block = blocks.inter.as_mut().expect("inter block exists");
        let c = cache.inter.as_ref().expect("inter cache exists");
        block.backward(c, &d)?;
    }
    Ok(())
}

/// Control for the retrieval-vs-random ablation: k training entries
/// sampled uniformly without replacement, deterministic per seed.
pub fn random_neighbors(index: &RetrievalIndex, k: usize, seed: u64) -> Result<NeighborSet> {
    if index.len() < k {
        return Err(Error::KExceedsIndex {
            k,
            available: index.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, index.len(), k);
    let neighbors = picks
        .iter()
        .map(|i| {
            let e = &index.entries[i];
            crate::index::Neighbor {
                id: e.id.clone(),
                pair_id: e.pair_id.clone(),
                similarity: 0.0,
                vector: e.vector.clone(),
                labels: e.labels,
                text: e.text.clone(),
                modality: e.modality,
                source: e.source,
            }
        })
        .collect();
    Ok(NeighborSet {
        query_id: None,
        neighbors,
        k,
    })
}
