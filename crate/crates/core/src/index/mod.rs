//! Non-parametric retrieval index over aligned training-set vectors.
//!
//! Queries are exact by default: a full scan with f64-accumulated dot
//! products (vectors are unit, so dot = cosine), ties broken by
//! ascending id. An inverted-file accelerator can be enabled
//! explicitly; it is off by default and never changes the file format.

mod file;
mod ivf;

pub use file::{load_index, save_index, IndexMeta};
pub use ivf::IvfParams;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedVector, Embedder};
use crate::data::{Dataset, EmbeddingRecord, Labels, Modality, Split};
use crate::error::{Error, Result};
use crate::numerics::{dot_wide, norm_wide};

/// Which modality the index serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexTarget {
    X,
    R,
    XR,
}

impl IndexTarget {
    pub fn tag(&self) -> u8 {
        match self {
            IndexTarget::X => 0,
            IndexTarget::R => 1,
            IndexTarget::XR => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(IndexTarget::X),
            1 => Ok(IndexTarget::R),
            2 => Ok(IndexTarget::XR),
            other => Err(Error::format(20, format!("unknown target tag {other}"))),
        }
    }
}

/// One indexed entry: an aligned unit vector with its annotations and
/// a provenance tag pointing into [`RetrievalIndex::sources`].
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub pair_id: String,
    pub vector: Vec<f32>,
    pub labels: Labels,
    pub text: Option<String>,
    pub modality: Modality,
    pub source: u8,
}

/// Immutable exact-kNN structure; frozen after build, append only via
/// [`extend_index`]. Queries are lock-free; share freely across
/// threads.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    pub target: IndexTarget,
    pub dim: usize,
    /// Sorted by id.
    pub entries: Vec<IndexEntry>,
    /// Provenance names, indexed by `IndexEntry::source`.
    pub sources: Vec<String>,
    /// Optional approximate accelerator, rebuilt deterministically.
    ivf: Option<ivf::IvfState>,
}

/// One retrieval result.
#[derive(Debug, Clone)]
pub struct Neighbor {
    pub id: String,
    pub pair_id: String,
    pub similarity: f64,
    pub vector: Vec<f32>,
    pub labels: Labels,
    pub text: Option<String>,
    pub modality: Modality,
    pub source: u8,
}

/// Ordered retrieval results; similarities non-increasing.
#[derive(Debug, Clone)]
pub struct NeighborSet {
    pub query_id: Option<String>,
    pub neighbors: Vec<Neighbor>,
    pub k: usize,
}

impl NeighborSet {
    /// Fraction of results per source tag; sums to 1 for non-empty sets.
    pub fn source_fractions(&self, n_sources: usize) -> Vec<f64> {
        let mut counts = vec![0usize; n_sources];
        for n in &self.neighbors {
            counts[n.source as usize] += 1;
        }
        let total = self.neighbors.len().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Neighbour vectors stacked into a k x dim matrix.
    pub fn matrix(&self) -> Result<crate::Mat> {
        let dim = self.neighbors.first().map(|n| n.vector.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(self.neighbors.len() * dim);
        for n in &self.neighbors {
            data.extend_from_slice(&n.vector);
        }
        crate::Mat::from_vec(self.neighbors.len(), dim, data)
    }
}

/// Encode all TRAIN records of the target modality and freeze them
/// into an index; entry order is sorted by id, so rebuilding from the
/// same inputs is byte-identical.
pub fn build_index(
    embedder: Embedder<'_>,
    dataset: &Dataset,
    target: IndexTarget,
) -> Result<RetrievalIndex> {
    let train = dataset.split_pairs(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty {
            what: "train split (index build)".into(),
        });
    }
    let mut entries = Vec::new();
    for pair in &train {
        let records: Vec<&EmbeddingRecord> = match target {
            IndexTarget::X => vec![&pair.image],
            IndexTarget::R => vec![&pair.report],
            IndexTarget::XR => vec![&pair.image, &pair.report],
        };
        for rec in records {
            let aligned = embedder.embed(rec)?;
            entries.push(IndexEntry {
                id: rec.id.clone(),
                pair_id: rec.pair_id.clone(),
                vector: aligned.values,
                labels: rec.labels,
                text: rec.text.clone(),
                modality: rec.modality,
                source: 0,
            });
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let index = RetrievalIndex {
        target,
        dim: dataset.z_enc,
        entries,
        sources: vec![dataset.name.clone()],
        ivf: None,
    };
    index.validate()?;
    Ok(index)
}

/// Append the TRAIN records of another dataset, encoded with `embedder`;
/// entries keep a provenance tag naming their source dataset.
pub fn extend_index(
    index: &RetrievalIndex,
    embedder: Embedder<'_>,
    new_dataset: &Dataset,
) -> Result<RetrievalIndex> {
    if new_dataset.z_enc != index.dim {
        return Err(Error::ShapeMismatch {
            op: "extend_index",
            left_rows: 1,
            left_cols: index.dim,
            right_rows: 1,
            right_cols: new_dataset.z_enc,
        });
    }
    let mut out = index.clone();
    out.ivf = None;
    let source = match out.sources.iter().position(|s| s == &new_dataset.name) {
        Some(i) => i as u8,
        None => {
            out.sources.push(new_dataset.name.clone());
            (out.sources.len() - 1) as u8
        }
    };
    for pair in new_dataset.split_pairs(Split::Train) {
        let records: Vec<&EmbeddingRecord> = match index.target {
            IndexTarget::X => vec![&pair.image],
            IndexTarget::R => vec![&pair.report],
            IndexTarget::XR => vec![&pair.image, &pair.report],
        };
        for rec in records {
            if out.entries.iter().any(|e| e.id == rec.id) {
                return Err(Error::IdCollision { id: rec.id.clone() });
            }
            let aligned = embedder.embed(rec)?;
            out.entries.push(IndexEntry {
                id: rec.id.clone(),
                pair_id: rec.pair_id.clone(),
                vector: aligned.values,
                labels: rec.labels,
                text: rec.text.clone(),
                modality: rec.modality,
                source,
            });
        }
    }
    out.entries.sort_by(|a, b| a.id.cmp(&b.id));
    out.validate()?;
    Ok(out)
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<&str> = None;
        for e in &self.entries {
            if e.vector.len() != self.dim {
                return Err(Error::validation(
                    &e.id,
                    format!("vector length {} != index dim {}", e.vector.len(), self.dim),
                ));
            }
            let n = norm_wide(&e.vector);
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::validation(&e.id, format!("vector norm {n} != 1")));
            }
            if let Some(p) = prev {
                if p >= e.id.as_str() {
                    return Err(Error::IdCollision { id: e.id.clone() });
                }
            }
            if e.source as usize >= self.sources.len() {
                return Err(Error::validation(
                    &e.id,
                    format!("source tag {} out of range", e.source),
                ));
            }
            prev = Some(&e.id);
        }
        Ok(())
    }

    /// Build the inverted-file accelerator; subsequent queries probe a
    /// subset of coarse cells instead of scanning everything.
    pub fn enable_ivf(&mut self, params: IvfParams) -> Result<()> {
        self.ivf = Some(ivf::IvfState::build(&self.entries, self.dim, params)?);
        Ok(())
    }

    pub fn ivf_params(&self) -> Option<IvfParams> {
        self.ivf.as_ref().map(|s| s.params)
    }

    /// Exact top-k by cosine similarity, skipping entries whose pair_id
    /// equals `exclude_pair_id`; ties broken by ascending id.
    pub fn query(
        &self,
        q: &[f32],
        k: usize,
        exclude_pair_id: Option<&str>,
    ) -> Result<NeighborSet> {
        if q.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "query",
                left_rows: 1,
                left_cols: q.len(),
                right_rows: 1,
                right_cols: self.dim,
            });
        }
        if k == 0 {
            return Err(Error::invalid_parameter("k", "must be at least 1"));
        }
        let candidates: Vec<usize> = match &self.ivf {
            Some(state) => state.candidates(q, k, exclude_pair_id, &self.entries),
            None => (0..self.entries.len())
                .filter(|&i| {
                    exclude_pair_id.is_none_or(|ex| self.entries[i].pair_id != ex)
                })
                .collect(),
        };
        if candidates.len() < k {
            return Err(Error::KExceedsIndex {
                k,
                available: candidates.len(),
            });
        }
        let mut scored: Vec<(f64, usize)> = candidates
            .into_iter()
            .map(|i| (dot_wide(q, &self.entries[i].vector), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.partial_cmp(&a.0)
                .expect("finite similarities")
                .then_with(|| self.entries[a.1].id.cmp(&self.entries[b.1].id))
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        let neighbors = scored
            .into_iter()
            .map(|(sim, i)| {
                let e = &self.entries[i];
                Neighbor {
                    id: e.id.clone(),
                    pair_id: e.pair_id.clone(),
                    similarity: sim,
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

    /// Query with an aligned vector, labelling the result with `id`.
    pub fn query_aligned(
        &self,
        q: &AlignedVector,
        query_id: &str,
        k: usize,
        exclude_pair_id: Option<&str>,
    ) -> Result<NeighborSet> {
        let mut set = self.query(&q.values, k, exclude_pair_id)?;
        set.query_id = Some(query_id.to_string());
        Ok(set)
    }

    /// Stable checksum over entry bytes; used to assert frozenness.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.id.as_bytes());
            eat(e.pair_id.as_bytes());
            for v in &e.vector {
                eat(&v.to_le_bytes());
            }
            eat(&e.labels.to_mask().to_le_bytes());
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn dataset(n: usize) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_pairs: n,
            z_enc: 16,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn build_cardinality_per_target() {
        let ds = dataset(100);
        let n_train = ds.split_pairs(Split::Train).len();
        let ix = build_index(Embedder::Identity, &ds, IndexTarget::X).unwrap();
        assert_eq!(ix.len(), n_train);
        let ixr = build_index(Embedder::Identity, &ds, IndexTarget::XR).unwrap();
        assert_eq!(ixr.len(), 2 * n_train);
    }

    #[test]
    fn self_retrieval_scores_one() {
        let ds = dataset(30);
        let ix = build_index(Embedder::Identity, &ds, IndexTarget::X).unwrap();
        let q = ix.entries[4].vector.clone();
        let got = ix.query(&q, 1, None).unwrap();
        assert_eq!(got.neighbors[0].id, ix.entries[4].id);
        assert!((got.neighbors[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn five_fixed_vectors_match_exhaustive_sort() {
        // 2-D unit vectors at known angles; verify against a brute-force
        // sort oracle.
        let angles = [0.0f64, 0.3, 1.0, 2.0, 3.0];
        let entries: Vec<IndexEntry> = angles
            .iter()
            .enumerate()
            .map(|(i, a)| IndexEntry {
                id: format!("e{i}"),
                pair_id: format!("p{i}"),
                vector: vec![a.cos() as f32, a.sin() as f32],
                labels: Labels::from_classes(&[0]),
                text: None,
                modality: Modality::Image,
                source: 0,
            })
            .collect();
        let ix = RetrievalIndex {
            target: IndexTarget::X,
            dim: 2,
            entries: entries.clone(),
            sources: vec!["t".into()],
            ivf: None,
        };
        let q = [0.6f64.cos() as f32, 0.6f64.sin() as f32];
        let got = ix.query(&q, 3, None).unwrap();

        let mut oracle: Vec<(f64, String)> = entries
            .iter()
            .map(|e| (dot_wide(&q, &e.vector), e.id.clone()))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let expect: Vec<String> = oracle.into_iter().take(3).map(|(_, id)| id).collect();
        let got_ids: Vec<String> = got.neighbors.iter().map(|n| n.id.clone()).collect();
        assert_eq!(got_ids, expect);
    }

    #[test]
    fn exclusion_returns_second_closest() {
        let ds = dataset(30);
        let ix = build_index(Embedder::Identity, &ds, IndexTarget::X).unwrap();
        let probe = &ix.entries[7];
        let q = probe.vector.clone();
        let unexcluded = ix.query(&q, 2, None).unwrap();
        let excluded = ix.query(&q, 1, Some(probe.pair_id.as_str())).unwrap();
        assert_eq!(unexcluded.neighbors[0].id, probe.id);
        assert_eq!(excluded.neighbors[0].id, unexcluded.neighbors[1].id);
    }

    #[test]
    fn k_exceeding_entries_is_an_error() {
        let ds = dataset(12);
        let n_train = ds.split_pairs(Split::Train).len();
        let ix = build_index(Embedder::Identity, &ds, IndexTarget::X).unwrap();
        let q = ix.entries[0].vector.clone();
        let err = ix.query(&q, n_train + 1, None).unwrap_err().to_string();
        assert!(err.contains("k exceeds index size"), "{err}");
        // Exclusion shrinks the candidate set by one pair.
        assert!(ix
            .query(&q, n_train, Some(ix.entries[0].pair_id.as_str()))
            .is_err());
    }

    #[test]
    fn topk_is_prefix_of_topk_plus_one() {
        let ds = dataset(60);
        let ix = build_index(Embedder::Identity, &ds, IndexTarget::XR).unwrap();
        let q = ix.entries[11].vector.clone();
        let k5: Vec<String> = ix
            .query(&q, 5, None)
            .unwrap()
            .neighbors
            .iter()
            .map(|n| n.id.clone())
            .collect();
        let k6: Vec<String> = ix
            .query(&q, 6, None)
            .unwrap()
            .neighbors
            .iter()
            .map(|n| n.id.clone())
            .collect();
        assert_eq!(k5[..], k6[..5]);
    }

    #[test]
    fn extend_adds_provenance() {
        let ds = dataset(40);
        let ix = build_index(Embedder::Identity, &ds, IndexTarget::X).unwrap();
        let n0 = ix.len();

        let mut other = dataset(20);
        other.name = "other".into();
        for (i, p) in other.pairs.iter_mut().enumerate() {
            p.pair_id = format!("q{i:05}");
            p.image.pair_id = p.pair_id.clone();
            p.image.id = format!("{}.x", p.pair_id);
            p.report.pair_id = p.pair_id.clone();
            p.report.id = format!("{}.r", p.pair_id);
        }
        let extended = extend_index(&ix, Embedder::Identity, &other).unwrap();
        assert_eq!(extended.len(), n0 + other.split_pairs(Split::Train).len());
        assert_eq!(extended.sources, vec!["synthetic".to_string(), "other".to_string()]);
        let tags: std::collections::BTreeSet<u8> =
            extended.entries.iter().map(|e| e.source).collect();
        assert_eq!(tags.len(), 2);

        // Extending with a dataset that has no train rows is a no-op.
        let mut empty = dataset(20);
        empty.pairs.clear();
        let unchanged = extend_index(&ix, Embedder::Identity, &empty).unwrap();
        assert_eq!(unchanged.len(), n0);
        assert_eq!(unchanged.checksum(), ix.checksum());
    }

    #[test]
    fn extend_rejects_id_collision() {
        let ds = dataset(20);
        let ix = build_index(Embedder::Identity, &ds, IndexTarget::X).unwrap();
        let mut dup = ds.clone();
        dup.name = "dup".into();
        assert!(matches!(
            extend_index(&ix, Embedder::Identity, &dup),
            Err(Error::IdCollision { .. })
        ));
    }

    #[test]
    fn source_fractions_partition() {
        let ds = dataset(40);
        let ix = build_index(Embedder::Identity, &ds, IndexTarget::X).unwrap();
        let q = ix.entries[3].vector.clone();
        let set = ix.query(&q, 10, None).unwrap();
        let fr = set.source_fractions(ix.sources.len());
        assert!((fr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
