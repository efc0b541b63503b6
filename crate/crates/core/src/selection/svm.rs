//! Soft-margin SVM meta-classifier: an SMO solver with second-order working
//! set selection over a precomputed kernel, plus grid search by
//! cross-validated HTER.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsif::ViewId;
use crate::error::{Error, Result};
use crate::fusion::{EnsembleMatrix, FeatureKind};
use crate::imaging::Label;
use crate::metrics::evaluate;
use crate::rng;

pub const SVM_MAGIC: &[u8; 4] = b"MVSV";
pub const SVM_VERSION: u32 = 1;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    Rbf { gamma: f64 },
    Linear,
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }

    /// Full n x n Gram matrix of row-major `x` with `d` columns.
    pub fn gram(&self, x: &[f64], d: usize) -> Vec<f64> {
        let n = if d == 0 { 0 } else { x.len() / d };
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = self.eval(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Stop when the maximal KKT violation falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tolerance: 1e-3, max_iterations: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// Decision value is sum_i alpha_i y_i K(x_i, x) - rho.
    pub rho: f64,
    pub iterations: usize,
}

/// Solve min 1/2 a'Qa - e'a s.t. 0 <= a <= c, y'a = 0 with Q = yy' * K.
/// `y` holds +1 / -1.
pub fn solve_dual(k: &[f64], y: &[f64], c: f64, cfg: &SolverConfig) -> Result<DualSolution> {
    let n = y.len();
    if k.len() != n * n {
        return Err(Error::validation("kernel matrix does not match label count"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::validation(format!("penalty {c} must be positive")));
    }
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;

    let mut iter = 0;
    loop {
        // i: maximal violating index from I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut gmax_idx = None;
        for t in 0..n {
            if y[t] > 0.0 {
                if !upper(alpha[t]) && -grad[t] >= gmax {
                    gmax = -grad[t];
                    gmax_idx = Some(t);
                }
            } else if !lower(alpha[t]) && grad[t] >= gmax {
                gmax = grad[t];
                gmax_idx = Some(t);
            }
        }
        // j: second-order choice from I_low.
        let mut gmax2 = f64::NEG_INFINITY;
        let mut gmin_idx = None;
        let mut obj_min = f64::INFINITY;
        if let Some(i) = gmax_idx {
            for t in 0..n {
                let (grad_diff, viol) = if y[t] > 0.0 {
                    if lower(alpha[t]) {
                        continue;
                    }
                    (gmax + grad[t], grad[t])
                } else {
                    if upper(alpha[t]) {
                        continue;
                    }
                    (gmax - grad[t], -grad[t])
                };
                gmax2 = gmax2.max(viol);
                if grad_diff > 0.0 {
                    let quad = k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t];
                    let quad = if quad > 0.0 { quad } else { TAU };
                    let obj = -(grad_diff * grad_diff) / quad;
                    if obj <= obj_min {
                        obj_min = obj;
                        gmin_idx = Some(t);
                    }
                }
            }
        }
        let residual = gmax + gmax2;
        let (Some(i), Some(j)) = (gmax_idx, gmin_idx) else {
            break;
        };
        if residual < cfg.tolerance {
            break;
        }
        if iter >= cfg.max_iterations {
            return Err(Error::SvmNotConverged { iterations: iter, residual });
        }
        iter += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = q(i, i) + q(j, j) + 2.0 * q(i, j);
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = q(i, i) + q(j, j) - 2.0 * q(i, j);
            let quad = if quad > 0.0 { quad } else { TAU };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Bias from free variables, else the midpoint of the feasible interval.
    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    Ok(DualSolution { alpha, rho, iterations: iter })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub c_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub folds: usize,
    pub features: FeatureKind,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![0.1, 1.0, 10.0, 100.0],
            gamma_grid: vec![0.01, 0.1, 1.0, 10.0],
            folds: 5,
            features: FeatureKind::Scores,
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub views: Vec<ViewId>,
    pub features: FeatureKind,
    pub kernel: Kernel,
    pub c: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Standardized support vectors, row-major.
    pub support: Vec<f64>,
    pub alpha: Vec<f64>,
    pub signs: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub c: f64,
    pub gamma: f64,
    pub cv_hter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaFit {
    pub model: SvmModel,
    pub grid: Vec<GridCell>,
    pub chosen: GridCell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutput {
    pub margins: Vec<f64>,
    pub decisions: Vec<Label>,
}

fn sign(l: Label) -> f64 {
    if l == Label::BonaFide {
        1.0
    } else {
        -1.0
    }
}

/// Per-column mean and standard deviation; constant columns get scale 1.
pub fn standardizer(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / d.max(1)).max(1) as f64;
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var.iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    (mean, scale)
}

/// Fit on row-major raw features with `d` columns.
pub fn fit_svm(
    x: &[f64],
    d: usize,
    labels: &[Label],
    kernel: Kernel,
    c: f64,
    solver: &SolverConfig,
) -> Result<SvmModel> {
    let (mean, scale) = standardizer(x, d);
    let z: Vec<f64> = x.chunks(d).flat_map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s)).collect();
    let y: Vec<f64> = labels.iter().map(|&l| sign(l)).collect();
    let sol = solve_dual(&kernel.gram(&z, d), &y, c, solver)?;
    let mut support = Vec::new();
    let (mut alpha, mut signs) = (Vec::new(), Vec::new());
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support.extend_from_slice(&z[i * d..(i + 1) * d]);
            alpha.push(a);
            signs.push(y[i]);
        }
    }
    Ok(SvmModel { views: Vec::new(), features: FeatureKind::Scores, kernel, c, mean, scale, support, alpha, signs, bias: -sol.rho })
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Decision value of one raw feature row.
    pub fn decision_value(&self, raw: &[f64]) -> f64 {
        let z: Vec<f64> = raw.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        let d = self.dim();
        let mut f = self.bias;
        for (i, (&a, &y)) in self.alpha.iter().zip(&self.signs).enumerate() {
            f += a * y * self.kernel.eval(&self.support[i * d..(i + 1) * d], &z);
        }
        f
    }

    pub fn decide(&self, raw: &[f64]) -> Label {
        if self.decision_value(raw) >= 0.0 {
            Label::BonaFide
        } else {
            Label::Attack
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(SVM_MAGIC)?;
        w.write_u32::<LittleEndian>(SVM_VERSION)?;
        w.write_u32::<LittleEndian>(self.views.len() as u32)?;
        for v in &self.views {
            let s = v.to_string();
            w.write_u32::<LittleEndian>(s.len() as u32)?;
            w.write_all(s.as_bytes())?;
        }
        w.write_u8((self.features == FeatureKind::Binary) as u8)?;
        match self.kernel {
            Kernel::Rbf { gamma } => {
                w.write_u8(0)?;
                w.write_f64::<LittleEndian>(gamma)?;
            }
            Kernel::Linear => {
                w.write_u8(1)?;
                w.write_f64::<LittleEndian>(0.0)?;
            }
        }
        w.write_f64::<LittleEndian>(self.c)?;
        w.write_f64::<LittleEndian>(self.bias)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_u32::<LittleEndian>(self.alpha.len() as u32)?;
        let all = self.mean.iter().chain(&self.scale).chain(&self.alpha).chain(&self.signs).chain(&self.support);
        for &v in all {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let t = |_| Error::Truncated("svm");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(t)?;
        if &magic != SVM_MAGIC {
            return Err(Error::BadMagic { expected: "svm", found: magic });
        }
        let version = r.read_u32::<LittleEndian>().map_err(t)?;
        if version != SVM_VERSION {
            return Err(Error::Version { what: "svm", version });
        }
        let nv = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let mut views = Vec::with_capacity(nv);
        for _ in 0..nv {
            let len = r.read_u32::<LittleEndian>().map_err(t)? as usize;
            let mut s = vec![0u8; len.min(64)];
            r.read_exact(&mut s).map_err(t)?;
            views.push(String::from_utf8_lossy(&s).parse()?);
        }
        let features = if r.read_u8().map_err(t)? == 1 { FeatureKind::Binary } else { FeatureKind::Scores };
        let tag = r.read_u8().map_err(t)?;
        let gamma = r.read_f64::<LittleEndian>().map_err(t)?;
        let kernel = match tag {
            0 => Kernel::Rbf { gamma },
            1 => Kernel::Linear,
            _ => return Err(Error::validation(format!("unknown kernel tag {tag}"))),
        };
        let c = r.read_f64::<LittleEndian>().map_err(t)?;
        let bias = r.read_f64::<LittleEndian>().map_err(t)?;
        let d = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let ns = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let mut read = |len: usize| -> Result<Vec<f64>> {
            let mut v = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut v).map_err(t)?;
            Ok(v)
        };
        let mean = read(d)?;
        let scale = read(d)?;
        let alpha = read(ns)?;
        let signs = read(ns)?;
        let support = read(ns * d)?;
        if !views.is_empty() && views.len() != d {
            return Err(Error::validation("svm view list does not match its dimension"));
        }
        Ok(Self { views, features, kernel, c, mean, scale, support, alpha, signs, bias })
    }
}

/// Fold index per sample, stratified by label, seeded.
pub fn stratified_folds(labels: &[Label], folds: usize, seed: u64) -> Vec<usize> {
    let mut out = vec![0; labels.len()];
    let mut r = rng::seeded(seed);
    for class in [Label::BonaFide, Label::Attack] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut r);
        for (pos, i) in members.into_iter().enumerate() {
            out[i] = pos % folds;
        }
    }
    out
}

fn subset(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect()
}

/// HTER in percent of pooled out-of-fold decisions.
fn cv_hter(x: &[f64], d: usize, labels: &[Label], fold_of: &[usize], folds: usize, kernel: Kernel, c: f64, solver: &SolverConfig) -> Result<f64> {
    let mut decisions = vec![Label::Attack; labels.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        let held: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let ty: Vec<Label> = train.iter().map(|&i| labels[i]).collect();
        let model = fit_svm(&subset(x, d, &train), d, &ty, kernel, c, solver)?;
        for &i in &held {
            decisions[i] = model.decide(&x[i * d..(i + 1) * d]);
        }
    }
    Ok(evaluate(&decisions, labels, "cv")?.hter.unwrap_or(f64::INFINITY))
}

fn class_counts(labels: &[Label]) -> (usize, usize) {
    let live = labels.iter().filter(|&&l| l == Label::BonaFide).count();
    (live, labels.len() - live)
}

/// Grid search over (C, gamma) by cross-validated HTER, then refit on all rows.
/// Equal HTERs keep the earlier cell (C outer, gamma inner).
pub fn train_meta_svm(m: &EnsembleMatrix, cfg: &MetaConfig) -> Result<MetaFit> {
    let labels = m.require_labels()?;
    let (live, attack) = class_counts(labels);
    if live < 2 || attack < 2 {
        return Err(Error::validation("meta classifier needs at least two samples of each class"));
    }
    if m.n_views() == 0 {
        return Err(Error::validation("meta classifier needs at least one view"));
    }
    if cfg.c_grid.is_empty() || cfg.gamma_grid.is_empty() {
        return Err(Error::validation("empty parameter grid"));
    }
    let d = m.n_views();
    let x = m.features(cfg.features == FeatureKind::Binary);
    let folds = cfg.folds.min(live).min(attack);
    if folds < 2 {
        return Err(Error::validation("cross-validation needs at least two folds"));
    }
    let fold_of = stratified_folds(labels, folds, cfg.seed);
    let cells: Vec<(f64, f64)> = cfg.c_grid.iter().flat_map(|&c| cfg.gamma_grid.iter().map(move |&g| (c, g))).collect();
    let grid: Vec<GridCell> = cells
        .par_iter()
        .map(|&(c, gamma)| {
            cv_hter(&x, d, labels, &fold_of, folds, Kernel::Rbf { gamma }, c, &cfg.solver).map(|cv_hter| GridCell { c, gamma, cv_hter })
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, cell) in grid.iter().enumerate() {
        if cell.cv_hter < grid[best].cv_hter {
            best = i;
        }
    }
    let chosen = grid[best].clone();
    let mut model = fit_svm(&x, d, labels, Kernel::Rbf { gamma: chosen.gamma }, chosen.c, &cfg.solver)?;
    model.views = m.views().to_vec();
    model.features = cfg.features;
    Ok(MetaFit { model, grid, chosen })
}

pub fn predict_meta(model: &SvmModel, m: &EnsembleMatrix) -> Result<MetaOutput> {
    let aligned = m.select_views(&model.views)?;
    let d = model.dim();
    let x = aligned.features(model.features == FeatureKind::Binary);
    let margins: Vec<f64> = x.chunks(d).map(|row| model.decision_value(row)).collect();
    let decisions = margins.iter().map(|&f| if f >= 0.0 { Label::BonaFide } else { Label::Attack }).collect();
    Ok(MetaOutput { margins, decisions })
}
