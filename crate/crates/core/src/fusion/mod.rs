//! Combining per-view decisions: the ensemble matrix, simple and weighted
//! voting, and the random forest used for ranking views.

mod ensemble;
pub mod forest;
pub mod vote;

pub use ensemble::EnsembleMatrix;
pub use forest::{predict_forest, train_forest, FeatureKind, ForestConfig, RandomForestModel};
pub use vote::{bwwv_weights, majority_vote, weighted_vote, VoteWeights, WeightCriterion};

use crate::imaging::Label;

/// Output of a fusion rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    /// Bona fide support in [0, 1].
    pub scores: Vec<f64>,
    pub decisions: Vec<Label>,
}

impl Fused {
    /// Score threshold 0.5 inclusive, as for single views.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let decisions = scores.iter().map(|&s| if s >= 0.5 { Label::BonaFide } else { Label::Attack }).collect();
        Self { scores, decisions }
    }

    /// Vote shares: bona fide only on a strict majority.
    pub fn from_votes(scores: Vec<f64>) -> Self {
        let decisions = scores.iter().map(|&s| if s > 0.5 { Label::BonaFide } else { Label::Attack }).collect();
        Self { scores, decisions }
    }
}
