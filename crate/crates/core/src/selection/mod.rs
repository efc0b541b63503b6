//! View selection by importance and complementarity, and the SVM that fuses
//! the selected views.

pub mod kappa;
pub mod select;
pub mod svm;

pub use kappa::{cohen_kappa, KappaMatrix};
pub use select::{select_views, ComplementarityMatrix, CountMode, SelectionConfig, SelectionResult};
pub use svm::{predict_meta, train_meta_svm, Kernel, MetaConfig, MetaFit, MetaOutput, SvmModel};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::EnsembleMatrix;
use crate::imaging::Label;
use crate::metrics::evaluate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSearch {
    pub best_k: usize,
    /// (k, mean cross-validated HTER in percent) per candidate.
    pub scores: Vec<(usize, f64)>,
}

/// Pooled out-of-fold HTER of the full select-then-fuse pipeline at one k.
pub fn cv_pipeline_hter(m: &EnsembleMatrix, sel: &SelectionConfig, meta: &MetaConfig) -> Result<f64> {
    let labels = m.require_labels()?;
    let live = labels.iter().filter(|&&l| l == Label::BonaFide).count();
    let folds = meta.folds.min(live).min(labels.len() - live);
    if folds < 2 {
        return Err(Error::validation("cross-validation needs at least two samples of each class"));
    }
    let fold_of = svm::stratified_folds(labels, folds, meta.seed);
    let mut decisions = vec![Label::Attack; labels.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        let held: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let part = |rows: &[usize], with_labels: bool| -> Result<EnsembleMatrix> {
            let ids = rows.iter().map(|&i| m.sample_ids()[i].clone()).collect();
            let scores = rows.iter().flat_map(|&i| m.score_row(i).iter().copied()).collect();
            let l = with_labels.then(|| rows.iter().map(|&i| labels[i]).collect());
            EnsembleMatrix::new(ids, m.views().to_vec(), scores, l)
        };
        let tm = part(&train, true)?;
        let chosen = select_views(&tm, sel)?;
        let fit = train_meta_svm(&tm.select_views(&chosen.selected)?, meta)?;
        let out = predict_meta(&fit.model, &part(&held, false)?)?;
        for (&i, d) in held.iter().zip(out.decisions) {
            decisions[i] = d;
        }
    }
    Ok(evaluate(&decisions, labels, "cv")?.hter.unwrap_or(f64::INFINITY))
}

/// Sweep k over `ks`, averaging the cross-validated HTER over datasets.
/// Equal means resolve to the smaller k.
pub fn grid_search_k(datasets: &[EnsembleMatrix], ks: &[usize], sel: &SelectionConfig, meta: &MetaConfig) -> Result<KSearch> {
    if ks.is_empty() || datasets.is_empty() {
        return Err(Error::validation("k search needs at least one k and one dataset"));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let scores: Vec<(usize, f64)> = ks
        .par_iter()
        .map(|&k| {
            let cfg = SelectionConfig { k, ..sel.clone() };
            let total: f64 = datasets.iter().map(|m| cv_pipeline_hter(m, &cfg, meta)).sum::<Result<f64>>()?;
            Ok((k, total / datasets.len() as f64))
        })
        .collect::<Result<_>>()?;
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 < best.1 {
            best = s;
        }
    }
    Ok(KSearch { best_k: best.0, scores })
}
