use serde::{Deserialize, Serialize};

use super::{EnsembleMatrix, Fused};
use crate::bsif::ViewId;
use crate::error::{Error, Result};
use crate::imaging::Label;

/// Per-sample majority of the binary view decisions. A tie is an attack.
pub fn majority_vote(m: &EnsembleMatrix) -> Fused {
    let d = m.n_views();
    let scores = (0..m.n_samples())
        .map(|i| (0..d).filter(|&j| m.decision(i, j) == Label::BonaFide).count() as f64 / d.max(1) as f64)
        .collect();
    Fused::from_votes(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightCriterion {
    #[default]
    Accuracy,
    /// Lower HTER earns the larger weight.
    Hter,
    /// Forest feature importance; higher is better.
    Importance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteWeights {
    pub views: Vec<ViewId>,
    pub weights: Vec<f64>,
    pub criterion: WeightCriterion,
}

/// Best-worst weights: the worst view gets 0, the best 1, linear between.
/// `values` are accuracies, HTERs or importances, per `criterion`.
pub fn bwwv_weights(views: &[ViewId], values: &[f64], criterion: WeightCriterion) -> Result<VoteWeights> {
    if views.len() != values.len() {
        return Err(Error::validation("one criterion value per view is required"));
    }
    if views.len() < 2 {
        return Err(Error::validation("weighted voting needs at least two views"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::validation(format!("criterion value {v} is not finite")));
    }
    let goodness: Vec<f64> = match criterion {
        WeightCriterion::Accuracy | WeightCriterion::Importance => values.to_vec(),
        WeightCriterion::Hter => values.iter().map(|v| -v).collect(),
    };
    let lo = goodness.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = goodness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = if hi == lo {
        vec![1.0; goodness.len()]
    } else {
        goodness.iter().map(|g| (g - lo) / (hi - lo)).collect()
    };
    Ok(VoteWeights { views: views.to_vec(), weights, criterion })
}

/// Weighted vote; columns are matched by view name. Ties are attacks.
pub fn weighted_vote(m: &EnsembleMatrix, w: &VoteWeights) -> Result<Fused> {
    let aligned = m.select_views(&w.views)?;
    let total: f64 = w.weights.iter().sum();
    let scores = (0..aligned.n_samples())
        .map(|i| {
            let live: f64 = (0..aligned.n_views())
                .filter(|&j| aligned.decision(i, j) == Label::BonaFide)
                .map(|j| w.weights[j])
                .sum();
            if total > 0.0 {
                live / total
            } else {
                0.0
            }
        })
        .collect();
    Ok(Fused::from_votes(scores))
}
