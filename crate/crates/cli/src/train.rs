//! Per-view network training (resumable) and prediction.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mvpad_core::cnn::{load_model, predict_view, save_model, train_view, write_train_log, Sample, ViewPrediction};
use mvpad_core::imaging::{AccessAudit, Partition};
use mvpad_core::{Dataset, EnsembleMatrix, Label, ViewId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::store::{self, Layout};
use crate::transform::{write_csv, InputIndex};
use crate::{PREDICT_STAGE, TRAIN_STAGE};

/// Outcome of one view's training run, kept next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSummary {
    pub view: String,
    pub best_epoch: usize,
    pub best_val_hter: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainStats {
    pub trained: Vec<ViewId>,
    pub skipped: Vec<ViewId>,
}

pub fn checkpoint_path(layout: &Layout, view: ViewId) -> PathBuf {
    layout.models().join(format!("{view}.mvpc"))
}

fn sidecar_path(layout: &Layout, view: ViewId) -> PathBuf {
    layout.models().join(format!("{view}.json"))
}

fn labeled(ds: &Dataset, partition: Partition, audit: &AccessAudit) -> Vec<(String, Label)> {
    let labels = ds.labels(partition, TRAIN_STAGE, audit);
    ds.in_partition(partition).map(|r| r.id.clone()).zip(labels).collect()
}

fn samples(index: &InputIndex, view: ViewId, rows: &[(String, Label)]) -> Result<Vec<Sample>> {
    rows.iter()
        .map(|(id, label)| Ok(Sample { id: id.clone(), input: index.load(id, view)?.data, label: *label }))
        .collect()
}

fn train_one(cfg: &ExperimentConfig, layout: &Layout, index: &InputIndex, view: ViewId, train: &[(String, Label)], val: &[(String, Label)]) -> Result<ViewSummary> {
    let tc = cfg.train_config(view);
    let out = train_view(view, &samples(index, view, train)?, &samples(index, view, val)?, &tc)?;
    let summary = ViewSummary {
        view: view.to_string(),
        best_epoch: out.best_epoch,
        best_val_hter: out.best_val_hter,
        epochs_run: out.log.len(),
    };
    store::write_with(&layout.models().join(format!("{view}.log.csv")), |tmp| Ok(write_train_log(&out.log, tmp)?))?;
    store::write_json(&sidecar_path(layout, view), &summary)?;
    // the checkpoint goes last: its presence marks the view as done
    store::write_with(&checkpoint_path(layout, view), |tmp| Ok(save_model(&out.model, tmp)?))?;
    Ok(summary)
}

/// Train every configured view that has no checkpoint yet.
pub fn run_train(cfg: &ExperimentConfig, ds: &Dataset, layout: &Layout, audit: &AccessAudit) -> Result<TrainStats> {
    let index = InputIndex::open(layout)?;
    let train = labeled(ds, Partition::Train, audit);
    let val = labeled(ds, Partition::Validation, audit);
    let views = cfg.views();
    let results: Vec<(ViewId, Result<bool>)> = views
        .par_iter()
        .map(|&v| {
            if checkpoint_path(layout, v).is_file() && sidecar_path(layout, v).is_file() {
                log::info!("train {v}: checkpoint exists, skipping");
                return (v, Ok(false));
            }
            let r = train_one(cfg, layout, &index, v, &train, &val).map(|s| {
                log::info!("train {v}: best epoch {} val HTER {:.2}", s.best_epoch, s.best_val_hter);
                true
            });
            (v, r)
        })
        .collect();

    let mut stats = TrainStats { trained: Vec::new(), skipped: Vec::new() };
    let mut failures = Vec::new();
    for (v, r) in results {
        match r {
            Ok(true) => stats.trained.push(v),
            Ok(false) => stats.skipped.push(v),
            Err(e) => failures.push(format!("{v}: {e:#}")),
        }
    }
    let summaries = views
        .iter()
        .filter(|&&v| checkpoint_path(layout, v).is_file())
        .map(|&v| store::read_json::<ViewSummary>(&sidecar_path(layout, v)))
        .collect::<Result<Vec<_>>>()?;
    write_csv(&layout.root.join("train_summary.csv"), &summaries)?;
    if !failures.is_empty() {
        bail!("training failed for {} view(s):\n{}", failures.len(), failures.join("\n"));
    }
    Ok(stats)
}

/// Score validation and both test partitions with every view's network and
/// write one ensemble matrix per partition. Only the validation matrix
/// carries labels.
pub fn run_predict(cfg: &ExperimentConfig, ds: &Dataset, layout: &Layout, audit: &AccessAudit) -> Result<()> {
    let views = cfg.views();
    let missing: Vec<String> = views.iter().filter(|&&v| !checkpoint_path(layout, v).is_file()).map(|v| v.to_string()).collect();
    if !missing.is_empty() {
        bail!("missing checkpoints for {} view(s): {}", missing.len(), missing.join(", "));
    }
    let index = InputIndex::open(layout)?;
    let partitions = [Partition::Validation, Partition::TestKnown, Partition::TestUnknown];
    let ids: HashMap<Partition, Vec<String>> =
        partitions.iter().map(|&p| (p, ds.in_partition(p).map(|r| r.id.clone()).collect())).collect();

    let per_view: Vec<(ViewId, Vec<Vec<ViewPrediction>>)> = views
        .par_iter()
        .map(|&v| -> Result<_> {
            let path = checkpoint_path(layout, v);
            let model = load_model(&path).with_context(|| format!("loading {}", path.display()))?;
            if model.view != v {
                bail!("{} holds a {} model", path.display(), model.view);
            }
            let preds = partitions
                .iter()
                .map(|p| {
                    // prediction never looks at labels; the field is a placeholder
                    let s = ids[p]
                        .iter()
                        .map(|id| Ok(Sample { id: id.clone(), input: index.load(id, v)?.data, label: Label::Attack }))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(predict_view(&model, &s)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((v, preds))
        })
        .collect::<Result<_>>()?;

    for (k, &p) in partitions.iter().enumerate() {
        let cols: Vec<(ViewId, Vec<ViewPrediction>)> = per_view.iter().map(|(v, preds)| (*v, preds[k].clone())).collect();
        let labels = (p == Partition::Validation).then(|| ds.labels(p, PREDICT_STAGE, audit));
        let m = EnsembleMatrix::from_predictions(&cols, labels)?;
        store::write_atomic(&layout.matrix(p), m.to_csv().as_bytes())?;
    }
    log::info!("predict: {} views scored", views.len());
    Ok(())
}
