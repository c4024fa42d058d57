use serde::{Deserialize, Serialize};

use super::DiagnosisError;

/// Four-level presentation of a presence probability, ordered from least to
/// most likely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LikelihoodBin {
    HighlyUnlikely,
    Unlikely,
    Likely,
    HighlyLikely,
}

impl LikelihoodBin {
    pub const ALL: [LikelihoodBin; 4] = [
        LikelihoodBin::HighlyUnlikely,
        LikelihoodBin::Unlikely,
        LikelihoodBin::Likely,
        LikelihoodBin::HighlyLikely,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LikelihoodBin::HighlyUnlikely => "Highly Unlikely",
            LikelihoodBin::Unlikely => "Unlikely",
            LikelihoodBin::Likely => "Likely",
            LikelihoodBin::HighlyLikely => "Highly Likely",
        }
    }
}

/// `[0, .25)`, `[.25, .5)`, `[.5, .75)`, `[.75, 1]`.
pub fn bin(p: f64) -> Result<LikelihoodBin, DiagnosisError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DiagnosisError::ProbabilityOutOfRange(p));
    }
    Ok(if p < 0.25 {
        LikelihoodBin::HighlyUnlikely
    } else if p < 0.5 {
        LikelihoodBin::Unlikely
    } else if p < 0.75 {
        LikelihoodBin::Likely
    } else {
        LikelihoodBin::HighlyLikely
    })
}

/// Percentage of examples whose score falls on the correct side of 0.5.
pub fn accuracy(positive_scores: &[f64], negative_scores: &[f64]) -> Option<f64> {
    let n = positive_scores.len() + negative_scores.len();
    if n == 0 {
        return None;
    }
    let correct = positive_scores.iter().filter(|s| **s >= 0.5).count()
        + negative_scores.iter().filter(|s| **s < 0.5).count();
    Some(100.0 * correct as f64 / n as f64)
}

/// Area under the ROC curve as a percentage, from the Mann-Whitney rank
/// statistic with mid-ranks for ties. Equals `P(s+ > s-) + P(s+ = s-)/2`.
/// `None` unless both classes are present.
pub fn auc(positive_scores: &[f64], negative_scores: &[f64]) -> Option<f64> {
    let (n_pos, n_neg) = (positive_scores.len(), negative_scores.len());
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|s| (*s, true))
        .chain(negative_scores.iter().map(|s| (*s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied block i..=j shares the average rank.
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_block = all[i..=j].iter().filter(|(_, p)| *p).count();
        rank_sum_pos += mid_rank * pos_in_block as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(100.0 * u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// Percent, threshold 0.5.
    pub accuracy: f64,
    /// Percent; absent when the split holds a single class.
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl SplitMetrics {
    pub fn from_scores(positive_scores: &[f64], negative_scores: &[f64]) -> Option<Self> {
        Some(Self {
            accuracy: accuracy(positive_scores, negative_scores)?,
            auc: auc(positive_scores, negative_scores),
            positives: positive_scores.len(),
            negatives: negative_scores.len(),
        })
    }
}
