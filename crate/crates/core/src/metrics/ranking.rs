//! Class-based average precision and ROC AUC.

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// One query's retrieval outcome: its labels and the labels of the
/// ranked results, best first.
#[derive(Debug, Clone)]
pub struct RankedRetrieval {
    pub query_labels: Labels,
    pub result_labels: Vec<Labels>,
}

/// Per-class average precision over the queries positive for `class`.
///
/// A result is relevant iff it carries the class. Each positive query
/// contributes `sum_j precision@j * rel_j / #relevant-retrieved`;
/// queries whose ranking holds no relevant result contribute 0.
/// Returns `None` when no query is positive for the class (the class
/// is skipped and flagged by the caller).
pub fn class_average_precision(rankings: &[RankedRetrieval], class: usize) -> Option<f64> {
    let mut ap_sum = 0.0f64;
    let mut n_queries = 0usize;
    for ranking in rankings {
        if !ranking.query_labels.is_active(class) {
            continue;
        }
        n_queries += 1;
        let mut relevant_seen = 0usize;
        let mut precision_sum = 0.0f64;
        for (j, labels) in ranking.result_labels.iter().enumerate() {
            if labels.is_active(class) {
                relevant_seen += 1;
                precision_sum += relevant_seen as f64 / (j + 1) as f64;
            }
        }
        if relevant_seen > 0 {
            ap_sum += precision_sum / relevant_seen as f64;
        }
    }
    if n_queries == 0 {
        None
    } else {
        Some(ap_sum / n_queries as f64)
    }
}

/// Per-class AP plus the weighted and unweighted averages.
#[derive(Debug, Clone)]
pub struct MapTable {
    pub class_names: Vec<String>,
    /// `None` marks a skipped class (no positive queries).
    pub per_class: Vec<Option<f64>>,
    /// Positive-query count per class, the weights behind `wavg`.
    pub positive_counts: Vec<usize>,
    pub wavg: f64,
    pub avg: f64,
}

pub fn map_table(rankings: &[RankedRetrieval], class_names: &[String]) -> Result<MapTable> {
    let per_class: Vec<Option<f64>> = (0..NUM_CLASSES)
        .map(|c| class_average_precision(rankings, c))
        .collect();
    let positive_counts: Vec<usize> = (0..NUM_CLASSES)
        .map(|c| {
            rankings
                .iter()
                .filter(|r| r.query_labels.is_active(c))
                .count()
        })
        .collect();
    let (wavg, avg) = weighted_and_macro(&per_class, &positive_counts)?;
    Ok(MapTable {
        class_names: class_names.to_vec(),
        per_class,
        positive_counts,
        wavg,
        avg,
    })
}

/// Weighted (by positive frequency) and unweighted means over the
/// non-skipped classes.
pub fn weighted_and_macro(values: &[Option<f64>], counts: &[usize]) -> Result<(f64, f64)> {
    let mut wsum = 0.0f64;
    let mut wtot = 0.0f64;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (v, &c) in values.iter().zip(counts.iter()) {
        if let Some(v) = v {
            wsum += v * c as f64;
            wtot += c as f64;
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty {
            what: "metric table: all classes skipped".into(),
        });
    }
    Ok((wsum / wtot, sum / n as f64))
}

/// Exact ROC AUC via the rank-sum (Mann-Whitney) formulation:
/// `P(score_pos > score_neg) + 0.5 * P(equal)` over all pairs.
/// Returns `None` when only one class is present.
pub fn roc_auc(scores: &[f64], targets: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), targets.len());
    let n_pos = targets.iter().filter(|&&t| t).count();
    let n_neg = targets.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups, then sum the positive ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if targets[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Scored multi-label predictions against binary targets.
#[derive(Debug, Clone)]
pub struct ScoredPredictions {
    /// One row per sample, one column per class.
    pub scores: Vec<Vec<f64>>,
    pub targets: Vec<Labels>,
}

impl ScoredPredictions {
    pub fn class_auc(&self, class: usize) -> Option<f64> {
        let scores: Vec<f64> = self.scores.iter().map(|row| row[class]).collect();
        let targets: Vec<bool> = self.targets.iter().map(|l| l.is_active(class)).collect();
        roc_auc(&scores, &targets)
    }

    pub fn per_class_auc(&self) -> Vec<Option<f64>> {
        (0..NUM_CLASSES).map(|c| self.class_auc(c)).collect()
    }

    /// Unweighted mean AUC over classes defined on this sample set.
    pub fn macro_auc(&self) -> Result<f64> {
        let per_class = self.per_class_auc();
        let counts = self.positive_counts();
        weighted_and_macro(&per_class, &counts).map(|(_, avg)| avg)
    }

    pub fn positive_counts(&self) -> Vec<usize> {
        (0..NUM_CLASSES)
            .map(|c| self.targets.iter().filter(|l| l.is_active(c)).count())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(classes: &[usize]) -> Labels {
        Labels::from_classes(classes)
    }

    #[test]
    fn ap_all_relevant_is_one() {
        let r = RankedRetrieval {
            query_labels: labels(&[2]),
            result_labels: vec![labels(&[2]); 5],
        };
        assert_eq!(class_average_precision(&[r], 2), Some(1.0));
    }

    #[test]
    fn ap_hand_enumeration() {
        // relevance pattern [1, 0, 1] -> (1/1 + 2/3) / 2 = 5/6
        let r = RankedRetrieval {
            query_labels: labels(&[0]),
            result_labels: vec![labels(&[0]), labels(&[1]), labels(&[0, 3])],
        };
        let ap = class_average_precision(&[r], 0).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn ap_all_irrelevant_is_zero_and_absent_class_skipped() {
        let r = RankedRetrieval {
            query_labels: labels(&[0]),
            result_labels: vec![labels(&[1]); 3],
        };
        assert_eq!(class_average_precision(&[r.clone()], 0), Some(0.0));
        assert_eq!(class_average_precision(&[r], 5), None);
    }

    #[test]
    fn map_table_arithmetic() {
        // Two classes with APs {1.0, 0.5} and frequencies {10, 30}:
        // avg 0.75, wavg 0.625.
        let mut rankings = Vec::new();
        for _ in 0..10 {
            rankings.push(RankedRetrieval {
                query_labels: labels(&[0]),
                result_labels: vec![labels(&[0])],
            });
        }
        for _ in 0..30 {
            rankings.push(RankedRetrieval {
                query_labels: labels(&[1]),
                result_labels: vec![labels(&[2]), labels(&[1])],
            });
        }
        let names: Vec<String> = crate::data::CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        let t = map_table(&rankings, &names).unwrap();
        assert_eq!(t.per_class[0], Some(1.0));
        assert_eq!(t.per_class[1], Some(0.5));
        assert!((t.avg - 0.75).abs() < 1e-12);
        assert!((t.wavg - 0.625).abs() < 1e-12);
    }

    #[test]
    fn auc_separation_and_inversion() {
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]),
            Some(1.0)
        );
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]),
            Some(0.0)
        );
    }

    #[test]
    fn auc_pair_enumeration() {
        // pos {0.9, 0.4}, neg {0.6, 0.1}: 3 wins of 4 pairs -> 0.75
        let auc = roc_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_single_class_undefined() {
        assert_eq!(roc_auc(&[0.3, 0.4], &[true, true]), None);
    }

    #[test]
    fn auc_ties_count_half() {
        let auc = roc_auc(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }
}
