//! View selection and the fusion rules. Everything here is fitted on the
//! labeled validation matrix; test matrices are only scored.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mvpad_core::fusion::{
    bwwv_weights, majority_vote, predict_forest, train_forest, weighted_vote, FeatureKind, ForestConfig, Fused,
    RandomForestModel, WeightCriterion,
};
use mvpad_core::imaging::Partition;
use mvpad_core::rng::derive_seed;
use mvpad_core::selection::{grid_search_k, predict_meta, select_views, train_meta_svm, MetaConfig, SelectionConfig, SelectionResult};
use mvpad_core::{EnsembleMatrix, Label};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ImportanceSource, Method};
use crate::store::{self, Layout};
use crate::transform::write_csv;

pub const TEST_PARTITIONS: [Partition; 2] = [Partition::TestKnown, Partition::TestUnknown];

// Seed streams derived from the master seed, one per fitted component.
const SELECTION_STREAM: u64 = 1;
const FOREST_STREAM: u64 = 2;
const META_STREAM: u64 = 3;

pub fn selection_config(cfg: &ExperimentConfig) -> SelectionConfig {
    SelectionConfig { seed: derive_seed(cfg.seed, SELECTION_STREAM), ..cfg.selection.clone() }
}

pub fn forest_config(cfg: &ExperimentConfig) -> ForestConfig {
    ForestConfig { seed: derive_seed(cfg.seed, FOREST_STREAM), features: FeatureKind::Binary, ..cfg.forest.clone() }
}

pub fn meta_config(cfg: &ExperimentConfig) -> MetaConfig {
    MetaConfig { seed: derive_seed(cfg.seed, META_STREAM), ..cfg.meta.clone() }
}

pub fn load_matrix(layout: &Layout, p: Partition) -> Result<EnsembleMatrix> {
    let path = layout.matrix(p);
    store::require_file(&path, "mvpad predict")?;
    Ok(EnsembleMatrix::load(&path).with_context(|| format!("loading {}", path.display()))?)
}

fn validation_matrix(layout: &Layout) -> Result<EnsembleMatrix> {
    let m = load_matrix(layout, Partition::Validation)?;
    if m.labels().is_none() {
        bail!("validation matrix has no labels");
    }
    Ok(m)
}

/// Run view selection on the validation matrix, choosing k first when a
/// search grid is configured.
pub fn run_select(cfg: &ExperimentConfig, layout: &Layout) -> Result<SelectionResult> {
    cfg.validate_selection()?;
    let m = validation_matrix(layout)?;
    let mut sel = selection_config(cfg);
    if let Some(ks) = &cfg.k_search {
        let search = grid_search_k(std::slice::from_ref(&m), ks, &sel, &meta_config(cfg))?;
        log::info!("select: k search picked k = {}", search.best_k);
        sel.k = search.best_k;
        store::write_json(&layout.k_search(), &search)?;
    }
    let res = select_views(&m, &sel)?;
    store::write_json(&layout.selection(), &res)?;
    log::info!(
        "select: {} views selected{}",
        res.selected.len(),
        if res.fallback { " (fallback to top k)" } else { "" }
    );
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DecisionRow {
    id: String,
    score: f64,
    decision: Label,
}

pub fn decisions_path(layout: &Layout, method: &str, p: Partition) -> PathBuf {
    layout.fusion().join(method).join(format!("{p}.csv"))
}

fn write_decisions(layout: &Layout, method: Method, p: Partition, ids: &[String], fused: &Fused) -> Result<()> {
    let rows: Vec<DecisionRow> = ids
        .iter()
        .zip(&fused.scores)
        .zip(&fused.decisions)
        .map(|((id, &score), &decision)| DecisionRow { id: id.clone(), score, decision })
        .collect();
    write_csv(&decisions_path(layout, method.name(), p), &rows)
}

/// Sample ids and decisions of one fused output file.
pub fn read_decisions(layout: &Layout, method: &str, p: Partition) -> Result<(Vec<String>, Vec<Label>)> {
    let path = decisions_path(layout, method, p);
    store::require_file(&path, "mvpad fuse")?;
    let mut r = csv::Reader::from_path(&path)?;
    let mut ids = Vec::new();
    let mut decisions = Vec::new();
    for row in r.deserialize() {
        let row: DecisionRow = row.with_context(|| format!("reading {}", path.display()))?;
        ids.push(row.id);
        decisions.push(row.decision);
    }
    Ok((ids, decisions))
}

/// Fit each requested fusion rule on validation and apply it to both test
/// partitions.
pub fn run_fuse(cfg: &ExperimentConfig, layout: &Layout, methods: &[Method]) -> Result<()> {
    let val = validation_matrix(layout)?;
    let tests: Vec<(Partition, EnsembleMatrix)> =
        TEST_PARTITIONS.iter().map(|&p| Ok((p, load_matrix(layout, p)?.without_labels()))).collect::<Result<_>>()?;
    let mut forest: Option<RandomForestModel> = None;
    let mut get_forest = || -> Result<RandomForestModel> {
        if let Some(f) = &forest {
            return Ok(f.clone());
        }
        let f = train_forest(&val, &forest_config(cfg))?;
        store::write_with(&layout.fusion().join("rf.mvrf"), |tmp| Ok(f.save(tmp)?))?;
        forest = Some(f.clone());
        Ok(f)
    };

    for &method in methods {
        let apply: Box<dyn Fn(&EnsembleMatrix) -> Result<Fused>> = match method {
            Method::Mv => Box::new(|m| Ok(majority_vote(m))),
            Method::Bwwva => {
                let w = bwwv_weights(val.views(), &val.view_accuracies()?, WeightCriterion::Accuracy)?;
                store::write_json(&layout.fusion().join("bwwva_weights.json"), &w)?;
                Box::new(move |m| Ok(weighted_vote(m, &w)?))
            }
            Method::Bwwvi => {
                let f = get_forest()?;
                let imp = match cfg.bwwvi_importance {
                    ImportanceSource::Mdi => f.importance_mdi.clone(),
                    ImportanceSource::Permutation => f.importance_permutation.clone(),
                };
                let w = bwwv_weights(&f.views, &imp, WeightCriterion::Importance)?;
                store::write_json(&layout.fusion().join("bwwvi_weights.json"), &w)?;
                Box::new(move |m| Ok(weighted_vote(m, &w)?))
            }
            Method::Rf => {
                let f = get_forest()?;
                Box::new(move |m| Ok(predict_forest(&f, m)?))
            }
            Method::Meta => {
                let sel = if layout.selection().is_file() {
                    SelectionResult::load(&layout.selection())?
                } else {
                    run_select(cfg, layout)?
                };
                let fit = train_meta_svm(&val.select_views(&sel.selected)?, &meta_config(cfg))?;
                store::write_with(&layout.fusion().join("meta.mvsv"), |tmp| Ok(fit.model.save(tmp)?))?;
                store::write_json(&layout.fusion().join("meta_grid.json"), &(&fit.grid, &fit.chosen))?;
                let model = fit.model;
                Box::new(move |m| {
                    let out = predict_meta(&model, m)?;
                    Ok(Fused { scores: out.margins, decisions: out.decisions })
                })
            }
        };
        for (p, m) in &tests {
            write_decisions(layout, method, *p, m.sample_ids(), &apply(m)?)?;
        }
        log::info!("fuse: {} done", method.name());
    }
    Ok(())
}
