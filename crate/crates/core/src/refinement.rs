//! Video-text score refinement.
//!
//! Each frame's score becomes a softmax-weighted mean of the initial scores
//! of the K temporal summaries closest to the frame's video snippet:
//!
//! ```text
//! refined[i] = sum_{k in K_i} a[k] * exp(<v_i, s_k>) / sum_{k in K_i} exp(<v_i, s_k>)
//! ```
//!
//! `K_i` ranges over every summary of the video, the frame's own included.
//! The exponent is the raw cosine similarity; there is no temperature.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::EmbeddingVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefinementError {
    #[error("misaligned refinement inputs: {snippets} snippets, {summaries} summaries, {scores} scores")]
    Misaligned {
        snippets: usize,
        summaries: usize,
        scores: usize,
    },
    #[error("embedding dimension mismatch ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("initial score {0} outside [0, 1]")]
    ScoreRange(f64),
}

#[derive(Debug, Clone)]
pub struct RefinementInputs<'a> {
    snippets: &'a [EmbeddingVector],
    summaries: &'a [EmbeddingVector],
    initial: &'a [f64],
    k: usize,
}

impl<'a> RefinementInputs<'a> {
    pub fn new(
        snippets: &'a [EmbeddingVector],
        summaries: &'a [EmbeddingVector],
        initial: &'a [f64],
        k: usize,
    ) -> Result<Self, RefinementError> {
        if snippets.len() != summaries.len() || snippets.len() != initial.len() {
            return Err(RefinementError::Misaligned {
                snippets: snippets.len(),
                summaries: summaries.len(),
                scores: initial.len(),
            });
        }
        if k == 0 {
            return Err(RefinementError::ZeroK);
        }
        if let Some(first) = snippets.first() {
            let dim = first.dim();
            if let Some(bad) = snippets.iter().chain(summaries).find(|e| e.dim() != dim) {
                return Err(RefinementError::Dimension(dim, bad.dim()));
            }
        }
        if let Some(&bad) = initial.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(RefinementError::ScoreRange(bad));
        }
        Ok(Self {
            snippets,
            summaries,
            initial,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.initial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial.is_empty()
    }

    pub fn similarity(&self, snippet: usize, summary: usize) -> f64 {
        self.snippets[snippet].dot(&self.summaries[summary])
    }

    /// Indices of the `min(K, M)` summaries most similar to snippet `i`,
    /// most similar first; ties go to the lower index.
    pub fn top_k_summaries(&self, i: usize) -> Vec<usize> {
        let sims: Vec<f64> = (0..self.len()).map(|j| self.similarity(i, j)).collect();
        top_k_indices(&sims, self.k)
    }

    pub fn refine(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let sims: Vec<f64> = (0..self.len()).map(|j| self.similarity(i, j)).collect();
                let neighbors = top_k_indices(&sims, self.k);
                softmax_weighted_mean(neighbors.iter().map(|&j| (sims[j], self.initial[j])))
            })
            .collect()
    }
}

/// Indices of the `min(k, len)` largest similarities, largest first; ties go
/// to the lower index.
pub fn top_k_indices(sims: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(sims.len()));
    order
}

/// Mean of `(similarity, score)` pairs weighted by `exp(similarity)`.
/// Exponentials are shifted by the maximum similarity, and the result is
/// held inside the score range so rounding never leaves the convex hull.
pub fn softmax_weighted_mean(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let pairs: Vec<(f64, f64)> = pairs.into_iter().collect();
    let max = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(sim, score) in &pairs {
        let w = (sim - max).exp();
        num += w * score;
        den += w;
        lo = lo.min(score);
        hi = hi.max(score);
    }
    (num / den).clamp(lo, hi)
}

/// Refines `initial` scores; convenience wrapper over [`RefinementInputs`].
pub fn refine(
    snippets: &[EmbeddingVector],
    summaries: &[EmbeddingVector],
    initial: &[f64],
    k: usize,
) -> Result<Vec<f64>, RefinementError> {
    Ok(RefinementInputs::new(snippets, summaries, initial, k)?.refine())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    /// Exhaustive neighbor oracle: rank every summary by counting how many
    /// others beat it, independent of any sort.
    fn oracle_neighbors(snips: &[Vec<f64>], sums: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let sims: Vec<f64> = sums.iter().map(|s| dot(&snips[i], s)).collect();
        let rank = |j: usize| {
            (0..sims.len())
                .filter(|&o| sims[o] > sims[j] || (sims[o] == sims[j] && o < j))
                .count()
        };
        let mut chosen: Vec<(usize, usize)> = (0..sims.len()).map(|j| (rank(j), j)).filter(|&(r, _)| r < k).collect();
        chosen.sort();
        chosen.into_iter().map(|(_, j)| j).collect()
    }

    #[test]
    fn neighbor_table_hand_written() {
        let snips = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.6, 0.8, 0.0],
            vec![0.0, 0.6, 0.8],
        ];
        let sums = vec![
            vec![0.8, 0.6, 0.0],
            vec![0.0, 0.8, 0.6],
            vec![0.6, 0.0, 0.8],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let expected: Vec<Vec<usize>> = (0..5).map(|i| oracle_neighbors(&snips, &sums, i, 2)).collect();
        // Frozen from the oracle.
        assert_eq!(expected, vec![vec![3, 0], vec![1, 0], vec![4, 2], vec![0, 1], vec![1, 4]]);

        let to_emb = |v: &Vec<Vec<f64>>| v.iter().map(|x| unit(&x.iter().map(|&y| y as f32).collect::<Vec<_>>())).collect::<Vec<_>>();
        let (se, me) = (to_emb(&snips), to_emb(&sums));
        let initial = vec![0.0; 5];
        let inputs = RefinementInputs::new(&se, &me, &initial, 2).unwrap();
        for (i, want) in expected.iter().enumerate() {
            assert_eq!(&inputs.top_k_summaries(i), want);
        }
    }

    #[test]
    fn k_clamps_to_lattice_length() {
        let e = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        let initial = vec![0.1, 0.2, 0.3];
        let inputs = RefinementInputs::new(&e, &e, &initial, 10).unwrap();
        let mut all = inputs.top_k_summaries(0);
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn two_neighbor_example() {
        // sims 0.2 and 0.8 against summaries scored 0 and 1
        let snip = unit(&[1.0, 0.0, 0.0]);
        let a = unit(&[0.2, (1.0f32 - 0.04).sqrt(), 0.0]);
        let b = unit(&[0.8, 0.0, 0.6]);
        let snippets = vec![snip.clone(), snip];
        let summaries = vec![a, b];
        let out = refine(&snippets, &summaries, &[0.0, 1.0], 2).unwrap();
        let expected = 1.0 / (1.0 + (-0.6f64).exp());
        assert!((out[0] - expected).abs() < 1e-6, "{} vs {expected}", out[0]);
        assert!((expected - 0.6457).abs() < 1e-4);
        let direct = softmax_weighted_mean([(0.2, 0.0), (0.8, 1.0)]);
        assert!((direct - expected).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_and_equal_sims() {
        assert_eq!(softmax_weighted_mean([(0.1, 0.3), (0.9, 0.3), (-0.4, 0.3)]), 0.3);
        let mean = softmax_weighted_mean([(0.5, 0.0), (0.5, 0.5), (0.5, 1.0)]);
        assert!((mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn k1_self_nearest_is_identity() {
        let e = vec![unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
        let initial = vec![0.1, 0.9, 0.4];
        assert_eq!(refine(&e, &e, &initial, 1).unwrap(), initial);
    }

    #[test]
    fn input_validation() {
        let e = vec![unit(&[1.0, 0.0])];
        assert_eq!(
            RefinementInputs::new(&e, &e, &[0.5], 0).unwrap_err(),
            RefinementError::ZeroK
        );
        assert!(RefinementInputs::new(&e, &e, &[0.5, 0.1], 1).is_err());
        assert!(RefinementInputs::new(&e, &e, &[1.5], 1).is_err());
        let f = vec![unit(&[1.0, 0.0, 0.0])];
        assert!(RefinementInputs::new(&e, &f, &[0.5], 1).is_err());
    }

    #[test]
    fn stable_at_extreme_similarities() {
        let v = softmax_weighted_mean([(1.0, 1.0), (-1.0, 0.0)]);
        assert!(v.is_finite());
        assert!((v - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    }
}
