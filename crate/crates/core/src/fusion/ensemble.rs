use std::collections::HashMap;
use std::path::Path;

use crate::bsif::ViewId;
use crate::cnn::ViewPrediction;
use crate::error::{Error, Result};
use crate::imaging::Label;

/// Samples x views table of liveness scores. Binary decisions are derived
/// with the 0.5 threshold. Labels are absent for matrices built from test
/// partitions until evaluation joins them.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMatrix {
    sample_ids: Vec<String>,
    views: Vec<ViewId>,
    scores: Vec<f64>,
    labels: Option<Vec<Label>>,
}

impl EnsembleMatrix {
    pub fn new(sample_ids: Vec<String>, views: Vec<ViewId>, scores: Vec<f64>, labels: Option<Vec<Label>>) -> Result<Self> {
        if scores.len() != sample_ids.len() * views.len() {
            return Err(Error::validation(format!(
                "{} scores for {} samples x {} views",
                scores.len(),
                sample_ids.len(),
                views.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != sample_ids.len() {
                return Err(Error::validation("label count differs from sample count"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = views.iter().find(|v| !seen.insert(**v)) {
            return Err(Error::validation(format!("duplicate view column {dup}")));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::validation(format!("score {bad} outside [0,1]")));
        }
        Ok(Self { sample_ids, views, scores, labels })
    }

    /// Assemble from per-view predictions; every view must cover the same
    /// samples in the same order.
    pub fn from_predictions(per_view: &[(ViewId, Vec<ViewPrediction>)], labels: Option<Vec<Label>>) -> Result<Self> {
        let Some((_, first)) = per_view.first() else {
            return Err(Error::validation("no view predictions"));
        };
        let ids: Vec<String> = first.iter().map(|p| p.id.clone()).collect();
        let mut scores = vec![0.0; ids.len() * per_view.len()];
        for (j, (view, preds)) in per_view.iter().enumerate() {
            if preds.len() != ids.len() || preds.iter().zip(&ids).any(|(p, id)| &p.id != id) {
                return Err(Error::validation(format!("predictions of {view} do not match the sample order")));
            }
            for (i, p) in preds.iter().enumerate() {
                scores[i * per_view.len() + j] = p.score;
            }
        }
        Self::new(ids, per_view.iter().map(|(v, _)| *v).collect(), scores, labels)
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn views(&self) -> &[ViewId] {
        &self.views
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[Label]> {
        self.labels().ok_or_else(|| Error::validation("ensemble matrix has no labels"))
    }

    pub fn with_labels(mut self, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != self.n_samples() {
            return Err(Error::validation("label count differs from sample count"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    #[inline]
    pub fn score(&self, sample: usize, view: usize) -> f64 {
        self.scores[sample * self.views.len() + view]
    }

    #[inline]
    pub fn decision(&self, sample: usize, view: usize) -> Label {
        if self.score(sample, view) >= 0.5 {
            Label::BonaFide
        } else {
            Label::Attack
        }
    }

    pub fn score_row(&self, sample: usize) -> &[f64] {
        &self.scores[sample * self.views.len()..(sample + 1) * self.views.len()]
    }

    pub fn decision_column(&self, view: usize) -> Vec<Label> {
        (0..self.n_samples()).map(|i| self.decision(i, view)).collect()
    }

    /// Row-major feature values: scores, or 0/1 decisions when `binary`.
    pub fn features(&self, binary: bool) -> Vec<f64> {
        if binary {
            self.scores.iter().map(|&s| if s >= 0.5 { 1.0 } else { 0.0 }).collect()
        } else {
            self.scores.clone()
        }
    }

    /// Copy restricted to (and reordered as) `views`.
    pub fn select_views(&self, views: &[ViewId]) -> Result<Self> {
        let index: HashMap<ViewId, usize> = self.views.iter().enumerate().map(|(j, v)| (*v, j)).collect();
        let missing: Vec<String> = views.iter().filter(|v| !index.contains_key(v)).map(|v| v.to_string()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingViews(missing));
        }
        let cols: Vec<usize> = views.iter().map(|v| index[v]).collect();
        let mut scores = Vec::with_capacity(self.n_samples() * cols.len());
        for i in 0..self.n_samples() {
            scores.extend(cols.iter().map(|&j| self.score(i, j)));
        }
        Ok(Self { sample_ids: self.sample_ids.clone(), views: views.to_vec(), scores, labels: self.labels.clone() })
    }

    /// Fraction of correct binary decisions per view.
    pub fn view_accuracies(&self) -> Result<Vec<f64>> {
        let labels = self.require_labels()?;
        let n = self.n_samples().max(1) as f64;
        Ok((0..self.n_views())
            .map(|j| (0..self.n_samples()).filter(|&i| self.decision(i, j) == labels[i]).count() as f64 / n)
            .collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,label");
        for v in &self.views {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
        for i in 0..self.n_samples() {
            out.push_str(&self.sample_ids[i]);
            out.push(',');
            if let Some(l) = &self.labels {
                out.push_str(l[i].as_str());
            }
            for s in self.score_row(i) {
                out.push(',');
                out.push_str(&s.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
        if header.len() < 2 || &header[0] != "sample_id" || &header[1] != "label" {
            return Err(Error::Parse { line: 1, message: "header must start with sample_id,label".into() });
        }
        let views: Vec<ViewId> = header.iter().skip(2).map(str::parse).collect::<Result<_>>()?;
        let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            ids.push(rec[0].to_string());
            labels.push(if rec[1].is_empty() {
                None
            } else {
                Some(rec[1].parse::<Label>().map_err(|message| Error::Parse { line, message })?)
            });
            for f in rec.iter().skip(2) {
                scores.push(f.parse::<f64>().map_err(|_| Error::Parse { line, message: format!("bad score {f:?}") })?);
            }
        }
        let labels = if labels.iter().all(Option::is_some) && !labels.is_empty() {
            Some(labels.into_iter().map(Option::unwrap).collect())
        } else if labels.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::validation("labels must be present on every row or on none"));
        };
        Self::new(ids, views, scores, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}
