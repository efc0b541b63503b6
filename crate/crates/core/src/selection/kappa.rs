use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsif::ViewId;
use crate::error::{Error, Result};
use crate::fusion::EnsembleMatrix;
use crate::imaging::Label;

/// Cohen's kappa between two binary decision sequences.
///
/// Counts are kept as integers so that p_e = 1 is detected exactly and the
/// result is symmetric bit for bit.
pub fn cohen_kappa(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!("kappa of sequences with lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::validation("kappa of empty sequences"));
    }
    let n = a.len() as u64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as u64;
    let ca = a.iter().filter(|&&x| x).count() as u64;
    let cb = b.iter().filter(|&&x| x).count() as u64;
    let expected = ca * cb + (n - ca) * (n - cb);
    let nn = n * n;
    if expected == nn {
        return Ok(if agree == n { 1.0 } else { 0.0 });
    }
    Ok(((agree * n) as f64 - expected as f64) / (nn - expected) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaMatrix {
    pub views: Vec<ViewId>,
    /// Row-major, `views.len()` squared.
    pub values: Vec<f64>,
}

impl KappaMatrix {
    pub fn from_ensemble(m: &EnsembleMatrix) -> Result<Self> {
        let columns: Vec<Vec<bool>> = (0..m.n_views())
            .map(|j| m.decision_column(j).into_iter().map(|l| l == Label::BonaFide).collect())
            .collect();
        Self::from_columns(m.views().to_vec(), &columns)
    }

    pub fn from_columns(views: Vec<ViewId>, columns: &[Vec<bool>]) -> Result<Self> {
        let d = columns.len();
        if views.len() != d {
            return Err(Error::validation("one decision column per view is required"));
        }
        let upper: Vec<Vec<f64>> = (0..d)
            .into_par_iter()
            .map(|i| ((i + 1)..d).map(|j| cohen_kappa(&columns[i], &columns[j])).collect::<Result<Vec<f64>>>())
            .collect::<Result<_>>()?;
        let mut values = vec![1.0; d * d];
        for i in 0..d {
            for (off, &k) in upper[i].iter().enumerate() {
                let j = i + 1 + off;
                values[i * d + j] = k;
                values[j * d + i] = k;
            }
        }
        Ok(Self { views, values })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }
}
