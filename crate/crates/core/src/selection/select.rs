use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kappa::KappaMatrix;
use crate::bsif::ViewId;
use crate::error::{Error, Result};
use crate::fusion::{train_forest, EnsembleMatrix, FeatureKind, ForestConfig};

/// How occurrences in the complementarity matrix are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    /// Complement of at least two distinct top views.
    #[default]
    Rows,
    /// Present at at least two distinct rank positions.
    Columns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    pub l: usize,
    pub count: CountMode,
    /// Add the top-k views themselves to the selected set.
    pub union_top_k: bool,
    pub trees: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { k: 16, l: 5, count: CountMode::Rows, union_top_k: false, trees: 100, seed: 0 }
    }
}

/// Rows are top views in importance order; row r lists the `l` views that
/// agree least with top view r.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityMatrix {
    pub top: Vec<ViewId>,
    pub complements: Vec<Vec<ViewId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedView {
    pub view: ViewId,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub config: SelectionConfig,
    pub ranking: Vec<RankedView>,
    pub kappa: KappaMatrix,
    pub complementarity: ComplementarityMatrix,
    pub selected: Vec<ViewId>,
    pub fallback: bool,
}

impl SelectionResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// View indices by decreasing importance; equal importances keep index order.
pub fn rank_by_importance(importance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    order
}

/// For each top view, the `l` other views with the smallest kappa against
/// it, ascending; equal kappas keep index order.
pub fn complement_rows(kappa: &KappaMatrix, top: &[usize], l: usize) -> Vec<Vec<usize>> {
    top.iter()
        .map(|&t| {
            let mut others: Vec<usize> = (0..kappa.len()).filter(|&j| j != t).collect();
            others.sort_by(|&a, &b| kappa.get(t, a).total_cmp(&kappa.get(t, b)).then(a.cmp(&b)));
            others.truncate(l);
            others
        })
        .collect()
}

/// Views counted at least twice under `mode`, in ascending index order.
pub fn repeated_views(rows: &[Vec<usize>], mode: CountMode) -> Vec<usize> {
    let mut seen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let key = if mode == CountMode::Rows { r } else { c };
            let at = seen.entry(v).or_default();
            if !at.contains(&key) {
                at.push(key);
            }
        }
    }
    seen.into_iter().filter(|(_, at)| at.len() >= 2).map(|(v, _)| v).collect()
}

/// Final subset from repeated views, with fallback to the top views when
/// fewer than two survive. Returns (indices, fallback).
pub fn finalize(repeated: Vec<usize>, top: &[usize], union_top_k: bool) -> (Vec<usize>, bool) {
    if repeated.len() < 2 {
        return (top.to_vec(), true);
    }
    let mut out = repeated;
    if union_top_k {
        for &t in top {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out.sort_unstable();
    }
    (out, false)
}

/// Select steps 2-5 given precomputed importances and kappas.
pub fn select_from(
    views: &[ViewId],
    importance: &[f64],
    kappa: KappaMatrix,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let d = views.len();
    if cfg.k == 0 || cfg.l == 0 {
        return Err(Error::validation("k and l must be at least 1"));
    }
    if cfg.k > d || cfg.l > d.saturating_sub(1) {
        return Err(Error::validation(format!("k={} l={} do not fit {d} views", cfg.k, cfg.l)));
    }
    let order = rank_by_importance(importance);
    let top = &order[..cfg.k];
    let rows = complement_rows(&kappa, top, cfg.l);
    let (chosen, fallback) = finalize(repeated_views(&rows, cfg.count), top, cfg.union_top_k);
    Ok(SelectionResult {
        config: cfg.clone(),
        ranking: order.iter().map(|&i| RankedView { view: views[i], importance: importance[i] }).collect(),
        complementarity: ComplementarityMatrix {
            top: top.iter().map(|&i| views[i]).collect(),
            complements: rows.iter().map(|r| r.iter().map(|&i| views[i]).collect()).collect(),
        },
        kappa,
        selected: chosen.iter().map(|&i| views[i]).collect(),
        fallback,
    })
}

/// Rank by forest MDI on binary decisions, pair each top view with its
/// least-agreeing partners, keep the views that recur.
pub fn select_views(m: &EnsembleMatrix, cfg: &SelectionConfig) -> Result<SelectionResult> {
    let forest_cfg = ForestConfig { trees: cfg.trees, seed: cfg.seed, features: FeatureKind::Binary, ..Default::default() };
    let forest = train_forest(m, &forest_cfg)?;
    let kappa = KappaMatrix::from_ensemble(m)?;
    select_from(m.views(), &forest.importance_mdi, kappa, cfg)
}
