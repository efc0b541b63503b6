//! Mini-batch SGD training with best-validation-epoch selection.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, ArchConfig, CnnModel, Params, Tensor4, CLASSES};
use crate::bsif::ViewId;
use crate::error::{Error, Result};
use crate::imaging::Label;
use crate::metrics;
use crate::rng;

const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without a validation HTER improvement before stopping.
    pub patience: usize,
    pub input_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            patience: 10,
            input_size: 260,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.input_size == 0 {
            return Err(Error::validation("epochs, patience and input_size must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size must be at least 2 for batch normalization"));
        }
        if !(self.learning_rate > 0.0) || !(self.momentum > 0.0) || !(self.weight_decay > 0.0) {
            return Err(Error::validation("learning rate, momentum and weight decay must be positive"));
        }
        Ok(())
    }
}

/// One preprocessed input: `channels x size x size` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Vec<f32>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPrediction {
    pub id: String,
    /// Probability of bona fide.
    pub score: f64,
    pub decision: Label,
}

impl ViewPrediction {
    pub fn from_score(id: impl Into<String>, score: f64) -> Self {
        let decision = if score >= 0.5 { Label::BonaFide } else { Label::Attack };
        Self { id: id.into(), score, decision }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hter: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedView {
    pub model: CnnModel<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_hter: f64,
}

fn channels_of(samples: &[Sample], size: usize) -> Result<usize> {
    let plane = size * size;
    let first = samples[0].input.len();
    if first == 0 || first % plane != 0 {
        return Err(Error::Shape { layer: "input", message: format!("{first} values is not a multiple of {size}x{size}") });
    }
    if let Some(s) = samples.iter().find(|s| s.input.len() != first) {
        return Err(Error::Shape { layer: "input", message: format!("sample {} has {} values, expected {first}", s.id, s.input.len()) });
    }
    Ok(first / plane)
}

fn assemble(samples: &[&Sample], channels: usize, size: usize) -> Result<Tensor4<f32>> {
    let mut data = Vec::with_capacity(samples.len() * channels * size * size);
    for s in samples {
        data.extend_from_slice(&s.input);
    }
    Tensor4::new([samples.len(), channels, size, size], data)
}

fn require_both_classes(samples: &[Sample], what: &str) -> Result<()> {
    let live = samples.iter().filter(|s| s.label == Label::BonaFide).count();
    if samples.is_empty() || live == 0 || live == samples.len() {
        return Err(Error::validation(format!("{what} split must be non-empty and contain both classes")));
    }
    Ok(())
}

/// Split shuffled indices into batches; a trailing singleton joins the
/// previous batch so batch statistics always exist.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

/// Train one view's network. The returned model carries the parameters of
/// the epoch with the lowest validation HTER (validation loss breaks ties).
pub fn train_view(view: ViewId, train: &[Sample], validation: &[Sample], cfg: &TrainConfig) -> Result<TrainedView> {
    cfg.validate()?;
    require_both_classes(train, "training")?;
    require_both_classes(validation, "validation")?;
    let channels = channels_of(train, cfg.input_size)?;
    if channels_of(validation, cfg.input_size)? != channels {
        return Err(Error::Shape { layer: "input", message: "train and validation channel counts differ".into() });
    }
    let arch = ArchConfig::standard(cfg.input_size, channels);
    let mut model = CnnModel::<f32>::new(view, arch, rng::derive_seed(cfg.seed, 0))?;
    let mut velocity = model.params.zeros_like();
    let mut shuffler = rng::seeded(rng::derive_seed(cfg.seed, 1));
    let (lr, mu, wd) = (cfg.learning_rate as f32, cfg.momentum as f32, cfg.weight_decay as f32);

    let val_labels: Vec<Label> = validation.iter().map(|s| s.label).collect();
    let val_targets: Vec<usize> = val_labels.iter().map(|l| l.index()).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, f64, usize, CnnModel<f32>)> = None;
    let mut best_hter = f64::INFINITY;
    let mut since_improvement = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffler);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = assemble(&refs, channels, cfg.input_size)?;
            let labels: Vec<usize> = refs.iter().map(|s| s.label.index()).collect();
            let (loss, grads) = model.loss_and_gradients(&batch, &labels)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss: loss as f64 });
            }
            sgd_step(&mut model.params, &mut velocity, &grads, lr, mu, wd);
            loss_sum += loss as f64 * idx.len() as f64;
            seen += idx.len();
        }

        let probs = probabilities(&model, validation, channels, cfg.input_size)?;
        let decisions: Vec<Label> = probs.chunks(CLASSES).map(|p| decide(p[1] as f64)).collect();
        let val_hter = metrics::evaluate(&decisions, &val_labels, "validation")?
            .hter
            .expect("both classes present");
        let val_loss = cross_entropy(&probs, &val_targets) as f64;
        log.push(EpochLog { epoch, train_loss: loss_sum / seen as f64, val_hter });

        let better = match &best {
            None => true,
            Some((h, l, _, _)) => val_hter < *h || (val_hter == *h && val_loss < *l),
        };
        if better {
            best = Some((val_hter, val_loss, epoch, model.clone()));
        }
        if val_hter < best_hter {
            best_hter = val_hter;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                break;
            }
        }
    }
    let (best_val_hter, _, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainedView { model, log, best_epoch, best_val_hter })
}

fn sgd_step(params: &mut Params<f32>, velocity: &mut Params<f32>, grads: &Params<f32>, lr: f32, mu: f32, wd: f32) {
    for i in 0..params.tensors.len() {
        let decay = if Params::<f32>::decays(i) { wd } else { 0.0 };
        let (w, v, g) = (&mut params.tensors[i], &mut velocity.tensors[i], &grads.tensors[i]);
        for ((wj, vj), gj) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vj = mu * *vj + *gj + decay * *wj;
            *wj -= lr * *vj;
        }
    }
}

fn decide(score: f64) -> Label {
    if score >= 0.5 {
        Label::BonaFide
    } else {
        Label::Attack
    }
}

fn probabilities(model: &CnnModel<f32>, samples: &[Sample], channels: usize, size: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(samples.len() * CLASSES);
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = assemble(&refs, channels, size)?;
        out.extend(model.predict_proba(&batch)?);
    }
    Ok(out)
}

/// Liveness score (bona fide probability) and 0.5-threshold decision per
/// sample, in input order.
pub fn predict_view(model: &CnnModel<f32>, samples: &[Sample]) -> Result<Vec<ViewPrediction>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let size = model.arch.input_size;
    let channels = channels_of(samples, size)?;
    let probs = probabilities(model, samples, channels, size)?;
    Ok(samples
        .iter()
        .zip(probs.chunks(CLASSES))
        .map(|(s, p)| ViewPrediction::from_score(s.id.clone(), p[1] as f64))
        .collect())
}

pub fn write_train_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "val_hter"]).expect("in-memory write");
    for e in log {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_hter.to_string()])
            .expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Parse { line: i + 2, message: e.to_string() }))
        .collect()
}
