//! Optional inverted-file accelerator: a coarse k-means quantizer over
//! the entries, probed at query time. Deterministic (fixed seed, fixed
//! iteration count) and purely in-memory; persistence stores only the
//! parameters and rebuilds on load.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::IndexEntry;
use crate::numerics::dot_wide;

const KMEANS_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvfParams {
    pub n_lists: usize,
    pub n_probe: usize,
}

impl IvfParams {
    /// Heuristic defaults: sqrt(n) lists, a quarter probed.
    pub fn for_size(n: usize) -> Self {
        let n_lists = ((n as f64).sqrt().ceil() as usize).max(1);
        Self {
            n_lists,
            n_probe: (n_lists / 4).max(4).min(n_lists),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IvfState {
    pub params: IvfParams,
    centroids: Vec<Vec<f32>>,
    lists: Vec<Vec<usize>>,
}

impl IvfState {
    pub fn build(entries: &[IndexEntry], dim: usize, params: IvfParams) -> Result<Self> {
        if params.n_lists == 0 || params.n_probe == 0 || params.n_probe > params.n_lists {
            return Err(Error::invalid_parameter(
                "ivf",
                format!(
                    "need 1 <= n_probe <= n_lists, got n_lists={} n_probe={}",
                    params.n_lists, params.n_probe
                ),
            ));
        }
        let n = entries.len();
        let k = params.n_lists.min(n.max(1));
        // Evenly strided init over the id-sorted entries.
        let mut centroids: Vec<Vec<f32>> = (0..k)
            .map(|i| entries[i * n / k].vector.clone())
            .collect();
        let mut assignment = vec![0usize; n];
        for _ in 0..KMEANS_ITERS {
            for (i, e) in entries.iter().enumerate() {
                assignment[i] = nearest(&centroids, &e.vector);
            }
            let mut sums = vec![vec![0.0f64; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, e) in entries.iter().enumerate() {
                counts[assignment[i]] += 1;
                for (s, &v) in sums[assignment[i]].iter_mut().zip(e.vector.iter()) {
                    *s += v as f64;
                }
            }
            for (c, (sum, &count)) in centroids.iter_mut().zip(sums.iter().zip(counts.iter())) {
                if count > 0 {
                    for (cv, &s) in c.iter_mut().zip(sum.iter()) {
                        *cv = (s / count as f64) as f32;
                    }
                }
            }
        }
        let mut lists = vec![Vec::new(); k];
        for (i, e) in entries.iter().enumerate() {
            lists[nearest(&centroids, &e.vector)].push(i);
        }
        Ok(Self {
            params: IvfParams {
                n_lists: k,
                n_probe: params.n_probe.min(k),
            },
            centroids,
            lists,
        })
    }

    /// Entry indices to score for this query. Falls back to the full
    /// candidate set when the probed cells cannot supply k results.
    pub fn candidates(
        &self,
        q: &[f32],
        k: usize,
        exclude_pair_id: Option<&str>,
        entries: &[IndexEntry],
    ) -> Vec<usize> {
        let mut ranked: Vec<(f64, usize)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (dot_wide(q, c), i))
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let keep = |&i: &usize| exclude_pair_id.is_none_or(|ex| entries[i].pair_id != ex);
        let mut out: Vec<usize> = ranked
            .iter()
            .take(self.params.n_probe)
            .flat_map(|&(_, list)| self.lists[list].iter().copied())
            .filter(|i| keep(i))
            .collect();
        if out.len() < k {
            out = (0..entries.len()).filter(|i| keep(i)).collect();
        }
        out
    }
}

fn nearest(centroids: &[Vec<f32>], v: &[f32]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, c) in centroids.iter().enumerate() {
        let s = dot_wide(v, c);
        if s > best.0 {
            best = (s, i);
        }
    }
    best.1
}
