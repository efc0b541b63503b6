//! Learning BSIF filter banks from natural image patches.
//!
//! Patches are mean-subtracted, whitened onto their top `n` principal
//! directions, and unmixed with symmetric FastICA (tanh contrast). The
//! independent directions mapped back through the whitening transform are
//! the filter kernels.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bsif::FilterBank;
use crate::error::{Error, Result};
use crate::imaging::GrayImage;
use crate::rng;

pub const MAX_ITERATIONS: usize = 1000;
pub const TOLERANCE: f64 = 1e-4;

/// Minimum number of patches per kernel tap.
pub const PATCHES_PER_TAP: usize = 50;

/// Draw `count` random `l`x`l` patches (row-major) from `images`.
pub fn sample_patches(images: &[GrayImage], l: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let usable: Vec<&GrayImage> = images.iter().filter(|im| im.width() >= l && im.height() >= l).collect();
    if usable.is_empty() {
        return Err(Error::validation(format!("no image large enough for {l}x{l} patches")));
    }
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let im = usable[r.random_range(0..usable.len())];
        let x0 = r.random_range(0..=im.width() - l);
        let y0 = r.random_range(0..=im.height() - l);
        let mut p = Vec::with_capacity(l * l);
        for y in y0..y0 + l {
            for x in x0..x0 + l {
                p.push(im.get(x, y));
            }
        }
        out.push(p);
    }
    Ok(out)
}

/// Whitening state for one patch size; reusable across bit depths.
pub struct PatchWhitening {
    side: usize,
    /// Centered patches, one per row.
    data: DMatrix<f64>,
    /// Eigenvalues sorted descending with matching eigenvector columns.
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl PatchWhitening {
    pub fn new(patches: &[Vec<f64>], side: usize) -> Result<Self> {
        let d = side * side;
        if patches.len() < PATCHES_PER_TAP * d {
            return Err(Error::validation(format!(
                "need at least {} patches of {side}x{side}, got {}",
                PATCHES_PER_TAP * d,
                patches.len()
            )));
        }
        if let Some(p) = patches.iter().find(|p| p.len() != d) {
            return Err(Error::validation(format!("patch with {} values, expected {d}", p.len())));
        }
        let m = patches.len();
        let mut data = DMatrix::<f64>::zeros(m, d);
        for (i, p) in patches.iter().enumerate() {
            let dc = p.iter().sum::<f64>() / d as f64;
            for (j, v) in p.iter().enumerate() {
                data[(i, j)] = v - dc;
            }
        }
        for j in 0..d {
            let mean = data.column(j).sum() / m as f64;
            data.column_mut(j).add_scalar_mut(-mean);
        }
        let cov = data.transpose() * &data / m as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let eigenvectors = DMatrix::from_fn(d, d, |r, c| eig.eigenvectors[(r, order[c])]);
        Ok(Self { side, data, eigenvalues, eigenvectors })
    }

    /// `n`x`d` whitening matrix `D^{-1/2} E^T` over the top `n` directions.
    fn whitening(&self, n: usize) -> Result<DMatrix<f64>> {
        let d = self.side * self.side;
        let mut v = DMatrix::zeros(n, d);
        for k in 0..n {
            let lambda = self.eigenvalues[k];
            if lambda <= 1e-12 {
                return Err(Error::validation(format!("patch covariance has rank < {n}")));
            }
            let s = 1.0 / lambda.sqrt();
            for j in 0..d {
                v[(k, j)] = self.eigenvectors[(j, k)] * s;
            }
        }
        Ok(v)
    }

    pub fn learn(&self, n: usize, seed: u64) -> Result<FilterBank> {
        let l = self.side;
        if n > l * l - 1 {
            return Err(Error::validation(format!("bit depth {n} exceeds {} for {l}x{l}", l * l - 1)));
        }
        let v = self.whitening(n)?;
        // whitened samples, one per column: n x m
        let z = &v * self.data.transpose();
        let unmix = fast_ica_symmetric(&z, seed)?;
        let kernels = unmix * v;
        let mut coeffs = Vec::with_capacity(n * l * l);
        for k in 0..n {
            let row: Vec<f64> = kernels.row(k).iter().copied().collect();
            // fix the arbitrary ICA sign: largest-magnitude tap positive
            let pivot = row.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            coeffs.extend(row.into_iter().map(|w| w * sign));
        }
        FilterBank::new(l, n, coeffs)
    }
}

/// Learn an `l`x`l`x`n` bank from `patches` (row-major, `l*l` values each).
pub fn learn_filter_bank(patches: &[Vec<f64>], l: usize, n: usize, seed: u64) -> Result<FilterBank> {
    PatchWhitening::new(patches, l)?.learn(n, seed)
}

fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.max(1e-300).sqrt()));
    &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w
}

/// Symmetric FastICA on whitened data `z` (components x samples).
/// Returns the unmixing matrix with orthonormal rows.
fn fast_ica_symmetric(z: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    let n = z.nrows();
    let m = z.ncols() as f64;
    let mut r = rng::seeded(seed);
    let init = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
    let mut w = symmetric_decorrelation(&init);
    let mut delta = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let y = &w * z;
        let g = y.map(f64::tanh);
        let g_prime_mean: Vec<f64> =
            (0..n).map(|i| g.row(i).iter().map(|t| 1.0 - t * t).sum::<f64>() / m).collect();
        let mut next = &g * z.transpose() / m;
        for i in 0..n {
            for j in 0..n {
                next[(i, j)] -= g_prime_mean[i] * w[(i, j)];
            }
        }
        let next = symmetric_decorrelation(&next);
        let cross = &next * w.transpose();
        delta = (0..n).map(|i| (cross[(i, i)].abs() - 1.0).abs()).fold(0.0, f64::max);
        w = next;
        if delta < TOLERANCE {
            return Ok(w);
        }
    }
    Err(Error::IcaNotConverged { iterations: MAX_ITERATIONS, last_delta: delta })
}
