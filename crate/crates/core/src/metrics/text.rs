//! Text-generation metrics: BLEU-n, ROUGE-L, simplified METEOR.
//!
//! Tokenization everywhere: lowercase, split on non-alphanumerics.
//! METEOR is "simplified": exact plus suffix-stemmed matching, no
//! synonym table.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Lowercase and split on non-alphanumeric characters.
pub fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Single-reference BLEU-n: geometric mean of clipped i-gram precisions
/// for i <= n, times the brevity penalty `e^(1 - r/c)` when the
/// candidate is shorter than the reference. Empty candidates and zero
/// overlap at any order score 0.
pub fn bleu_n(candidate: &[String], reference: &[String], n: usize) -> Result<f64> {
    if n == 0 || n > 4 {
        return Err(Error::invalid_parameter(
            "n",
            format!("BLEU order must lie in 1..=4, got {n}"),
        ));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for i in 1..=n {
        let cand_counts = ngram_counts(candidate, i);
        let ref_counts = ngram_counts(reference, i);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let clipped: usize = cand_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(precision * bp)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// LCS-based ROUGE-L F-measure with configurable beta:
/// `F = (1 + b^2) P R / (R + b^2 P)` with `P = LCS/|cand|`,
/// `R = LCS/|ref|`.
pub fn rouge_l_beta(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// ROUGE-L with the default beta = 1.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    rouge_l_beta(candidate, reference, 1.0)
}

/// Strip one common English suffix, longest first, keeping stems of at
/// least three characters.
pub fn stem(token: &str) -> &str {
    for suffix in ["ings", "ing", "ed", "es", "ly", "s"] {
        if let Some(st) = token.strip_suffix(suffix) {
            if st.len() >= 3 {
                return st;
            }
        }
    }
    token
}

/// Simplified METEOR: unigram alignment by exact match first, then
/// suffix-stemmed match; harmonic mean F with alpha = 0.9; fragmentation
/// penalty `0.5 * (chunks/matches)^3`. No synonym module.
pub fn meteor_simplified(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    // alignment[i] = Some(ref position) for candidate position i.
    let mut alignment: Vec<Option<usize>> = vec![None; candidate.len()];
    let mut ref_used = vec![false; reference.len()];

    for exact in [true, false] {
        let mut prev_ref: Option<usize> = None;
        for (ci, ctok) in candidate.iter().enumerate() {
            if alignment[ci].is_some() {
                prev_ref = alignment[ci];
                continue;
            }
            let matches_at = |rj: usize| {
                if ref_used[rj] {
                    return false;
                }
                if exact {
                    reference[rj] == *ctok
                } else {
                    stem(&reference[rj]) == stem(ctok)
                }
            };
            // Prefer the position that extends the previous match into a
            // contiguous chunk; otherwise take the earliest unused one.
            let contiguous = prev_ref.map(|p| p + 1).filter(|&rj| rj < reference.len());
            let chosen = match contiguous {
                Some(rj) if matches_at(rj) => Some(rj),
                _ => (0..reference.len()).find(|&rj| matches_at(rj)),
            };
            if let Some(rj) = chosen {
                alignment[ci] = Some(rj);
                ref_used[rj] = true;
            }
            prev_ref = alignment[ci];
        }
    }

    let pairs: Vec<(usize, usize)> = alignment
        .iter()
        .enumerate()
        .filter_map(|(ci, rj)| rj.map(|r| (ci, r)))
        .collect();
    let matches = pairs.len();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 1usize;
    for w in pairs.windows(2) {
        let (c0, r0) = w[0];
        let (c1, r1) = w[1];
        if c1 != c0 + 1 || r1 != r0 + 1 {
            chunks += 1;
        }
    }
    let m = matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let alpha = 0.9;
    let f_mean = p * r / (alpha * p + (1.0 - alpha) * r);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            toks("The cat, sat-down!"),
            vec!["the", "cat", "sat", "down"]
        );
        assert!(toks("...").is_empty());
    }

    #[test]
    fn bleu_identity_is_one() {
        let t = toks("pleural effusion with consolidation");
        for n in 1..=4 {
            assert_eq!(bleu_n(&t, &t, n).unwrap(), 1.0);
        }
    }

    #[test]
    fn bleu_disjoint_is_zero() {
        assert_eq!(bleu_n(&toks("a b c"), &toks("x y z"), 1).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_closed_form() {
        // cand "the cat sat" vs ref "the cat sat down":
        // BLEU-1 = 1.0 * e^(1 - 4/3)
        let got = bleu_n(&toks("the cat sat"), &toks("the cat sat down"), 1).unwrap();
        let expect = (1.0f64 - 4.0 / 3.0).exp();
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
        assert!((got - 0.7165).abs() < 5e-4);
    }

    #[test]
    fn bleu_empty_candidate_is_zero() {
        assert_eq!(bleu_n(&[], &toks("a b"), 2).unwrap(), 0.0);
    }

    #[test]
    fn bleu_rejects_bad_order() {
        assert!(bleu_n(&toks("a"), &toks("a"), 0).is_err());
        assert!(bleu_n(&toks("a"), &toks("a"), 5).is_err());
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let t = toks("no finding observed");
        assert_eq!(rouge_l(&t, &t), 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("x y")), 0.0);
        assert_eq!(rouge_l(&[], &t), 0.0);
    }

    #[test]
    fn rouge_hand_lcs() {
        // cand "a b c d", ref "a c d": LCS 3, P = 3/4, R = 1 -> F = 6/7
        let f = rouge_l(&toks("a b c d"), &toks("a c d"));
        assert!((f - 6.0 / 7.0).abs() < 1e-12, "f {f}");
    }

    #[test]
    fn meteor_identity_formula() {
        // One chunk over m matches: 1 - 0.5/m^3.
        let t = toks("dense airspace opacity in the left lobe");
        let m = t.len() as f64;
        let got = meteor_simplified(&t, &t);
        assert!((got - (1.0 - 0.5 / m.powi(3))).abs() < 1e-12);
    }

    #[test]
    fn meteor_disjoint_is_zero() {
        assert_eq!(meteor_simplified(&toks("a b c"), &toks("x y z")), 0.0);
    }

    #[test]
    fn meteor_reversal_scores_below_identity() {
        let fwd = toks("one two three four five");
        let rev: Vec<String> = fwd.iter().rev().cloned().collect();
        let same = meteor_simplified(&fwd, &fwd);
        let reversed = meteor_simplified(&rev, &fwd);
        assert!(reversed < same, "reversed {reversed} !< identical {same}");
    }

    #[test]
    fn meteor_stemmed_matches_count() {
        // "finding" vs "findings" only align through the stemmer.
        let got = meteor_simplified(&toks("finding"), &toks("findings"));
        assert!(got > 0.0);
    }

    #[test]
    fn stemmer_keeps_short_tokens() {
        assert_eq!(stem("as"), "as");
        assert_eq!(stem("consolidations"), "consolidation");
        assert_eq!(stem("noted"), "not");
    }
}
