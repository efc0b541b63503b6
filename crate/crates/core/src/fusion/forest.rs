//! Random forest over view predictions, with out-of-bag error and both
//! importance measures (mean decrease in impurity, permutation).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EnsembleMatrix, Fused};
use crate::bsif::ViewId;
use crate::error::{Error, Result};
use crate::imaging::Label;
use crate::rng;

pub const FOREST_MAGIC: &[u8; 4] = b"MVRF";
pub const FOREST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// 0/1 view decisions.
    #[default]
    Binary,
    /// Raw liveness scores.
    Scores,
}

impl FeatureKind {
    fn binary(self) -> bool {
        self == FeatureKind::Binary
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub min_leaf: usize,
    /// Candidate views per split; `None` means ceil(sqrt(#views)).
    pub max_features: Option<usize>,
    pub permutation_repeats: usize,
    pub features: FeatureKind,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { trees: 100, min_leaf: 2, max_features: None, permutation_repeats: 1, features: FeatureKind::Binary, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    /// Bootstrap class counts `[attack, bona fide]`.
    Leaf { counts: [usize; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    /// Row indices drawn for this tree (with repetition).
    pub bootstrap: Vec<usize>,
}

impl DecisionTree {
    /// Leaf reached by `row` (feature values indexed by column).
    pub fn leaf(&self, row: &[f64]) -> [usize; 2] {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Split { feature, threshold, left, right } => {
                    at = if row[feature] <= threshold { left } else { right };
                }
                Node::Leaf { counts } => return counts,
            }
        }
    }

    /// Majority class of the reached leaf; ties go to attack.
    pub fn vote(&self, row: &[f64]) -> Label {
        let [a, b] = self.leaf(row);
        if b > a {
            Label::BonaFide
        } else {
            Label::Attack
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestModel {
    pub views: Vec<ViewId>,
    pub features: FeatureKind,
    pub trees: Vec<DecisionTree>,
    pub oob_error: f64,
    pub importance_mdi: Vec<f64>,
    pub importance_permutation: Vec<f64>,
    pub seed: u64,
}

fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (p0, p1) = (counts[0] as f64 / n, counts[1] as f64 / n);
    1.0 - p0 * p0 - p1 * p1
}

struct Grower<'a> {
    x: &'a [f64],
    y: &'a [usize],
    d: usize,
    mtry: usize,
    min_leaf: usize,
    total: f64,
    nodes: Vec<Node>,
    importance: Vec<f64>,
}

impl Grower<'_> {
    fn counts(&self, rows: &[usize]) -> [usize; 2] {
        let mut c = [0, 0];
        for &r in rows {
            c[self.y[r]] += 1;
        }
        c
    }

    /// Best threshold of one feature: (impurity decrease, threshold).
    fn best_threshold(&self, rows: &[usize], feature: usize, parent: [usize; 2]) -> Option<(f64, f64)> {
        let mut vals: Vec<(f64, usize)> = rows.iter().map(|&r| (self.x[r * self.d + feature], self.y[r])).collect();
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        if vals.first()?.0 == vals.last()?.0 {
            return None;
        }
        let n = vals.len();
        let parent_gini = gini(parent);
        let mut left = [0usize; 2];
        let mut best: Option<(f64, f64)> = None;
        for i in 0..n - 1 {
            left[vals[i].1] += 1;
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = n - nl;
            if nl < self.min_leaf || nr < self.min_leaf {
                continue;
            }
            let right = [parent[0] - left[0], parent[1] - left[1]];
            let child = (nl as f64 * gini(left) + nr as f64 * gini(right)) / n as f64;
            let gain = parent_gini - child;
            if best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, 0.5 * (vals[i].0 + vals[i + 1].0)));
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, r: &mut rng::Rng) -> usize {
        let id = self.nodes.len();
        let counts = self.counts(&rows);
        self.nodes.push(Node::Leaf { counts });
        if counts[0] == 0 || counts[1] == 0 || rows.len() < 2 * self.min_leaf {
            return id;
        }
        let mut order: Vec<usize> = (0..self.d).collect();
        order.shuffle(r);
        let mut visited = 0;
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &order {
            if visited >= self.mtry {
                break;
            }
            let Some((gain, thr)) = self.best_threshold(&rows, f, counts) else {
                continue; // constant in this node; does not use up a draw
            };
            visited += 1;
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, thr));
            }
        }
        let Some((gain, feature, threshold)) = best.filter(|b| b.0 > 1e-12) else {
            return id;
        };
        self.importance[feature] += rows.len() as f64 / self.total * gain;
        let (l, rr): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&row| self.x[row * self.d + feature] <= threshold);
        let left = self.grow(l, r);
        let right = self.grow(rr, r);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }
}

fn grow_tree(x: &[f64], y: &[usize], d: usize, cfg: &ForestConfig, mtry: usize, seed: u64) -> (DecisionTree, Vec<f64>) {
    let n = y.len();
    let mut r = rng::seeded(seed);
    let bootstrap: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
    let mut g = Grower {
        x,
        y,
        d,
        mtry,
        min_leaf: cfg.min_leaf.max(1),
        total: n as f64,
        nodes: Vec::new(),
        importance: vec![0.0; d],
    };
    g.grow(bootstrap.clone(), &mut r);
    (DecisionTree { nodes: g.nodes, bootstrap }, g.importance)
}

fn oob_masks(trees: &[DecisionTree], n: usize) -> Vec<Vec<bool>> {
    trees
        .iter()
        .map(|t| {
            let mut inbag = vec![false; n];
            t.bootstrap.iter().for_each(|&i| inbag[i] = true);
            inbag.into_iter().map(|b| !b).collect()
        })
        .collect()
}

/// OOB misclassification rate given a feature-row accessor.
fn oob_error_with(trees: &[DecisionTree], oob: &[Vec<bool>], y: &[usize], row: impl Fn(usize) -> Vec<f64>) -> f64 {
    let n = y.len();
    let mut votes = vec![[0usize; 2]; n];
    for (t, mask) in trees.iter().zip(oob) {
        for i in (0..n).filter(|&i| mask[i]) {
            votes[i][t.vote(&row(i)).index()] += 1;
        }
    }
    let mut scored = 0usize;
    let mut wrong = 0usize;
    for (v, &truth) in votes.iter().zip(y) {
        if v[0] + v[1] == 0 {
            continue;
        }
        scored += 1;
        let pred = if v[1] > v[0] { 1 } else { 0 };
        if pred != truth {
            wrong += 1;
        }
    }
    if scored == 0 {
        0.0
    } else {
        wrong as f64 / scored as f64
    }
}

pub fn train_forest(m: &EnsembleMatrix, cfg: &ForestConfig) -> Result<RandomForestModel> {
    let labels = m.require_labels()?;
    let y: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let live = y.iter().filter(|&&c| c == 1).count();
    if live < 2 || y.len() - live < 2 {
        return Err(Error::validation("forest needs at least two samples of each class"));
    }
    if cfg.trees == 0 {
        return Err(Error::validation("forest needs at least one tree"));
    }
    let d = m.n_views();
    if d == 0 {
        return Err(Error::validation("ensemble matrix has no views"));
    }
    let mtry = cfg.max_features.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d);
    let x = m.features(cfg.features.binary());

    let grown: Vec<(DecisionTree, Vec<f64>)> = (0..cfg.trees)
        .into_par_iter()
        .map(|t| grow_tree(&x, &y, d, cfg, mtry, rng::derive_seed(cfg.seed, t as u64)))
        .collect();

    let mut mdi = vec![0.0; d];
    let mut contributing = 0usize;
    for (_, imp) in &grown {
        let s: f64 = imp.iter().sum();
        if s > 0.0 {
            contributing += 1;
            for (acc, v) in mdi.iter_mut().zip(imp) {
                *acc += v / s;
            }
        }
    }
    let total: f64 = mdi.iter().sum();
    if contributing == 0 || total <= 0.0 {
        mdi = vec![1.0 / d as f64; d];
    } else {
        mdi.iter_mut().for_each(|v| *v /= total);
    }

    let trees: Vec<DecisionTree> = grown.into_iter().map(|(t, _)| t).collect();
    let oob = oob_masks(&trees, y.len());
    let row = |i: usize| x[i * d..(i + 1) * d].to_vec();
    let oob_error = oob_error_with(&trees, &oob, &y, row);

    let repeats = cfg.permutation_repeats.max(1);
    let permutation: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::seeded(rng::derive_seed(cfg.seed ^ 0x5045_524D, j as u64));
            let mut total = 0.0;
            for _ in 0..repeats {
                let mut perm: Vec<usize> = (0..y.len()).collect();
                perm.shuffle(&mut r);
                let permuted = |i: usize| {
                    let mut v = x[i * d..(i + 1) * d].to_vec();
                    v[j] = x[perm[i] * d + j];
                    v
                };
                total += oob_error_with(&trees, &oob, &y, permuted) - oob_error;
            }
            total / repeats as f64
        })
        .collect();

    Ok(RandomForestModel {
        views: m.views().to_vec(),
        features: cfg.features,
        trees,
        oob_error,
        importance_mdi: mdi,
        importance_permutation: permutation,
        seed: cfg.seed,
    })
}

/// Fraction of trees voting bona fide per sample, thresholded at 0.5.
pub fn predict_forest(f: &RandomForestModel, m: &EnsembleMatrix) -> Result<Fused> {
    let aligned = m.select_views(&f.views)?;
    let d = f.views.len();
    let x = aligned.features(f.features.binary());
    let n_trees = f.trees.len() as f64;
    let scores: Vec<f64> = (0..aligned.n_samples())
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            f.trees.iter().filter(|t| t.vote(row) == Label::BonaFide).count() as f64 / n_trees
        })
        .collect();
    Ok(Fused::from_scores(scores))
}

impl RandomForestModel {
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
        w.write_all(FOREST_MAGIC)?;
        w.write_u32::<LittleEndian>(FOREST_VERSION)?;
        w.write_u32::<LittleEndian>(self.views.len() as u32)?;
        for v in &self.views {
            let s = v.to_string();
            w.write_u32::<LittleEndian>(s.len() as u32)?;
            w.write_all(s.as_bytes())?;
        }
        w.write_u8(self.features.binary() as u8)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_f64::<LittleEndian>(self.oob_error)?;
        for &v in self.importance_mdi.iter().chain(&self.importance_permutation) {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(self.trees.len() as u32)?;
        for t in &self.trees {
            w.write_u32::<LittleEndian>(t.bootstrap.len() as u32)?;
            for &b in &t.bootstrap {
                w.write_u32::<LittleEndian>(b as u32)?;
            }
            w.write_u32::<LittleEndian>(t.nodes.len() as u32)?;
            for node in &t.nodes {
                match *node {
                    Node::Split { feature, threshold, left, right } => {
                        w.write_u8(0)?;
                        w.write_u32::<LittleEndian>(feature as u32)?;
                        w.write_f64::<LittleEndian>(threshold)?;
                        w.write_u32::<LittleEndian>(left as u32)?;
                        w.write_u32::<LittleEndian>(right as u32)?;
                    }
                    Node::Leaf { counts } => {
                        w.write_u8(1)?;
                        w.write_u32::<LittleEndian>(counts[0] as u32)?;
                        w.write_u32::<LittleEndian>(counts[1] as u32)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let t = |_| Error::Truncated("forest");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(t)?;
        if &magic != FOREST_MAGIC {
            return Err(Error::BadMagic { expected: "forest", found: magic });
        }
        let version = r.read_u32::<LittleEndian>().map_err(t)?;
        if version != FOREST_VERSION {
            return Err(Error::Version { what: "forest", version });
        }
        let d = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let mut views = Vec::with_capacity(d);
        for _ in 0..d {
            let len = r.read_u32::<LittleEndian>().map_err(t)? as usize;
            let mut s = vec![0u8; len.min(64)];
            r.read_exact(&mut s).map_err(t)?;
            views.push(String::from_utf8_lossy(&s).parse()?);
        }
        let features = if r.read_u8().map_err(t)? == 1 { FeatureKind::Binary } else { FeatureKind::Scores };
        let seed = r.read_u64::<LittleEndian>().map_err(t)?;
        let oob_error = r.read_f64::<LittleEndian>().map_err(t)?;
        let mut imp = vec![0.0; 2 * d];
        r.read_f64_into::<LittleEndian>(&mut imp).map_err(t)?;
        let importance_permutation = imp.split_off(d);
        let n_trees = r.read_u32::<LittleEndian>().map_err(t)? as usize;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let nb = r.read_u32::<LittleEndian>().map_err(t)? as usize;
            let mut bootstrap = Vec::with_capacity(nb);
            for _ in 0..nb {
                bootstrap.push(r.read_u32::<LittleEndian>().map_err(t)? as usize);
            }
            let nn = r.read_u32::<LittleEndian>().map_err(t)? as usize;
            let mut nodes = Vec::with_capacity(nn);
            for _ in 0..nn {
                nodes.push(match r.read_u8().map_err(t)? {
                    0 => {
                        let feature = r.read_u32::<LittleEndian>().map_err(t)? as usize;
                        let threshold = r.read_f64::<LittleEndian>().map_err(t)?;
                        let left = r.read_u32::<LittleEndian>().map_err(t)? as usize;
                        let right = r.read_u32::<LittleEndian>().map_err(t)? as usize;
                        if feature >= d || left >= nn || right >= nn {
                            return Err(Error::validation("forest node references a missing column or child"));
                        }
                        Node::Split { feature, threshold, left, right }
                    }
                    1 => Node::Leaf {
                        counts: [
                            r.read_u32::<LittleEndian>().map_err(t)? as usize,
                            r.read_u32::<LittleEndian>().map_err(t)? as usize,
                        ],
                    },
                    tag => return Err(Error::validation(format!("unknown forest node tag {tag}"))),
                });
            }
            trees.push(DecisionTree { nodes, bootstrap });
        }
        Ok(Self { views, features, trees, oob_error, importance_mdi: imp, importance_permutation, seed })
    }
}
