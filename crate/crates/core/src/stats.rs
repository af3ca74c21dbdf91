//! Per-(layer, expert) activation statistics and the blended importance score.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trace::{SequenceTrace, TokenRouting};

/// Default weight of activation counts in the importance blend.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Activation counts `P` and routing-score sums `W` for one stage of a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStats {
    pub counts: Vec<Vec<u64>>,
    pub score_sums: Vec<Vec<f64>>,
    pub token_count: usize,
}

impl StageStats {
    pub fn zeros(num_layers: usize, num_experts: usize) -> Self {
        Self {
            counts: vec![vec![0; num_experts]; num_layers],
            score_sums: vec![vec![0.0; num_experts]; num_layers],
            token_count: 0,
        }
    }

    /// Counts every selection and sums its stored score. The stored score is
    /// already renormalized over the token's k selections.
    pub fn collect(tokens: &[TokenRouting], num_experts: usize) -> Result<Self> {
        let first = tokens.first().ok_or(Error::EmptyStage("stage"))?;
        let mut stats = Self::zeros(first.layers.len(), num_experts);
        for tok in tokens {
            stats.add_token(tok);
        }
        Ok(stats)
    }

    pub fn add_token(&mut self, tok: &TokenRouting) {
        for (layer, sels) in tok.layers.iter().enumerate() {
            for s in sels {
                self.counts[layer][s.expert as usize] += 1;
                self.score_sums[layer][s.expert as usize] += s.score;
            }
        }
        self.token_count += 1;
    }

    /// Accumulates another stage of the same shape.
    pub fn merge(&mut self, other: &StageStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.score_sums.iter_mut().zip(&other.score_sums) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.token_count += other.token_count;
    }

    pub fn num_layers(&self) -> usize {
        self.counts.len()
    }

    pub fn num_experts(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    /// Activation counts of one layer as an L1-normalized frequency vector.
    pub fn frequencies(&self, layer: usize) -> Vec<f64> {
        l1_normalize(
            &self.counts[layer]
                .iter()
                .map(|&c| c as f64)
                .collect::<Vec<_>>(),
        )
    }
}

/// L1 normalization; an all-zero vector maps to the uniform vector.
pub fn l1_normalize(v: &[f64]) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    if sum > 0.0 {
        v.iter().map(|x| x / sum).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceScores {
    pub scores: Vec<Vec<f64>>,
    pub alpha: f64,
}

impl ImportanceScores {
    pub fn num_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn num_experts(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// Experts of `layer` restricted to `subset`, most important first.
    /// Ties go to the lower expert id.
    pub fn ranked(&self, layer: usize, subset: &[usize]) -> Vec<usize> {
        let row = &self.scores[layer];
        let mut ids = subset.to_vec();
        ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        ids
    }
}

/// `S = alpha * norm(P) + (1 - alpha) * norm(W)` per layer.
pub fn importance(stats: &StageStats, alpha: f64) -> Result<ImportanceScores> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let scores = stats
        .counts
        .iter()
        .zip(&stats.score_sums)
        .map(|(p, w)| {
            let p = l1_normalize(&p.iter().map(|&c| c as f64).collect::<Vec<_>>());
            let w = l1_normalize(w);
            p.iter()
                .zip(&w)
                .map(|(pe, we)| alpha * pe + (1.0 - alpha) * we)
                .collect()
        })
        .collect();
    Ok(ImportanceScores { scores, alpha })
}

/// Cosine similarity of two nonnegative vectors; 0 if either is all zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Similarity {
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

/// Per-layer cosine similarity between the activation distributions of two
/// stages, and its mean over layers.
pub fn stage_similarity(a: &StageStats, b: &StageStats) -> Result<Similarity> {
    if a.num_layers() != b.num_layers() || a.num_experts() != b.num_experts() {
        return Err(Error::Config(format!(
            "stage shapes differ: {}x{} vs {}x{}",
            a.num_layers(),
            a.num_experts(),
            b.num_layers(),
            b.num_experts()
        )));
    }
    let per_layer: Vec<f64> = a
        .counts
        .iter()
        .zip(&b.counts)
        .map(|(pa, pb)| {
            let na = l1_dist_or_zero(pa);
            let nb = l1_dist_or_zero(pb);
            cosine(&na, &nb)
        })
        .collect();
    let mean = if per_layer.is_empty() {
        0.0
    } else {
        per_layer.iter().sum::<f64>() / per_layer.len() as f64
    };
    Ok(Similarity { per_layer, mean })
}

/// Mean over sequences of each sequence's layer-averaged prefill/decode
/// similarity. 0 for an empty list.
pub fn sequence_similarity(traces: &[SequenceTrace], num_experts: usize) -> Result<f64> {
    if traces.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for seq in traces {
        let a = StageStats::collect(&seq.prefill, num_experts)?;
        let b = StageStats::collect(&seq.decode, num_experts)?;
        total += stage_similarity(&a, &b)?.mean;
    }
    Ok(total / traces.len() as f64)
}

// similarity keeps zero vectors as zero so they score 0 rather than uniform
fn l1_dist_or_zero(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        vec![0.0; counts.len()]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// Writes `layer,expert,P,W,S` rows.
pub fn write_scores_csv<W: Write>(
    out: W,
    stats: &StageStats,
    scores: &ImportanceScores,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "expert", "P", "W", "S"])?;
    for (l, row) in scores.scores.iter().enumerate() {
        for (e, s) in row.iter().enumerate() {
            w.write_record([
                l.to_string(),
                e.to_string(),
                stats.counts[l][e].to_string(),
                stats.score_sums[l][e].to_string(),
                s.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_from(p: &[u64], w: &[f64]) -> StageStats {
        StageStats {
            counts: vec![p.to_vec()],
            score_sums: vec![w.to_vec()],
            token_count: 1,
        }
    }

    #[test]
    fn single_token_bookkeeping() {
        let tok = TokenRouting::single_layer(&[(0, 0.7), (3, 0.3)]);
        let s = StageStats::collect(&[tok], 8).unwrap();
        assert_eq!(s.counts[0], vec![1, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(
            s.score_sums[0],
            vec![0.7, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(s.token_count, 1);
    }

    #[test]
    fn constant_routing() {
        let toks: Vec<_> = (0..17)
            .map(|_| TokenRouting::single_layer(&[(0, 0.5), (1, 0.5)]))
            .collect();
        let s = StageStats::collect(&toks, 4).unwrap();
        assert_eq!(s.counts[0], vec![17, 17, 0, 0]);
    }

    #[test]
    fn empty_stage_is_error() {
        assert!(matches!(
            StageStats::collect(&[], 4),
            Err(Error::EmptyStage(_))
        ));
    }

    #[test]
    fn importance_hand_example() {
        let s = importance(&stats_from(&[3, 1], &[0.9, 0.1]), 0.5).unwrap();
        assert!((s.scores[0][0] - 0.825).abs() < 1e-12);
        assert!((s.scores[0][1] - 0.175).abs() < 1e-12);
    }

    #[test]
    fn importance_alpha_one_is_frequency() {
        let st = stats_from(&[5, 2, 1], &[0.1, 0.8, 3.0]);
        let s = importance(&st, 1.0).unwrap();
        assert_eq!(s.scores[0], vec![5.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0]);
    }

    #[test]
    fn importance_symmetric() {
        for alpha in [0.0, 0.3, 1.0] {
            let s = importance(&stats_from(&[2, 2], &[1.0, 1.0]), alpha).unwrap();
            assert_eq!(s.scores[0], vec![0.5, 0.5]);
        }
    }

    #[test]
    fn importance_degenerate_layer_uniform() {
        let s = importance(&stats_from(&[0, 0, 0, 0], &[0.0; 4]), 0.5).unwrap();
        assert_eq!(s.scores[0], vec![0.25; 4]);
    }

    #[test]
    fn importance_rejects_alpha() {
        assert!(importance(&stats_from(&[1], &[1.0]), 1.5).is_err());
    }

    #[test]
    fn similarity_cases() {
        let a = stats_from(&[1, 0], &[1.0, 0.0]);
        let b = stats_from(&[0, 1], &[0.0, 1.0]);
        assert_eq!(stage_similarity(&a, &a).unwrap().mean, 1.0);
        assert_eq!(stage_similarity(&a, &b).unwrap().mean, 0.0);
        let z = stats_from(&[0, 0], &[0.0, 0.0]);
        assert_eq!(stage_similarity(&a, &z).unwrap().per_layer, vec![0.0]);
    }

    #[test]
    fn ranked_breaks_ties_by_index() {
        let s = ImportanceScores {
            scores: vec![vec![0.1, 0.3, 0.3, 0.3]],
            alpha: 0.5,
        };
        assert_eq!(s.ranked(0, &[0, 3, 2, 1]), vec![1, 2, 3, 0]);
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let st = stats_from(&[3, 1], &[0.9, 0.1]);
        let sc = importance(&st, 0.5).unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &st, &sc).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "layer,expert,P,W,S");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0,3,0.9,"));
    }
}
