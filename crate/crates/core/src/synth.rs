//! Deterministic synthetic two-class texture corpus.
//!
//! Bona fide samples are band-limited Gaussian noise. Attack samples carry the
//! same kind of field overlaid with a periodic halftone dot lattice (printout
//! surrogate) or concentric rings (textured lens surrogate). The
//! `test_unknown` partition uses a different overlay than train and
//! `test_known`, so generalization is not free.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{write_manifest, Dataset, GrayImage, Label, Partition, SampleRecord};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayKind {
    Halftone,
    Rings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub kind: OverlayKind,
    /// Pixels per cycle.
    pub period: f64,
    /// Modulation depth in (0, 1].
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_per_class: usize,
    pub test_known_per_class: usize,
    pub test_unknown_per_class: usize,
    pub image_size: usize,
    /// Gaussian low-pass width of the bona fide field, in pixels.
    pub smoothness: f64,
    /// Standard deviation of the field around mid-gray.
    pub contrast: f64,
    pub known_attack: Overlay,
    pub unknown_attack: Overlay,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_per_class: 50,
            test_known_per_class: 50,
            test_unknown_per_class: 50,
            image_size: 64,
            smoothness: 1.5,
            contrast: 0.15,
            known_attack: Overlay { kind: OverlayKind::Halftone, period: 4.0, amplitude: 0.35 },
            unknown_attack: Overlay { kind: OverlayKind::Halftone, period: 7.0, amplitude: 0.25 },
            seed: 2017,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, o) in [("known", self.known_attack), ("unknown", self.unknown_attack)] {
            if o.period < 2.0 {
                return Err(Error::validation(format!("{name} overlay period {} below 2 pixels", o.period)));
            }
            if !(o.amplitude > 0.0 && o.amplitude <= 1.0) {
                return Err(Error::validation(format!("{name} overlay amplitude {} not in (0,1]", o.amplitude)));
            }
        }
        if self.image_size < 8 {
            return Err(Error::validation("image size must be at least 8"));
        }
        if self.smoothness <= 0.0 || self.contrast <= 0.0 {
            return Err(Error::validation("smoothness and contrast must be positive"));
        }
        Ok(())
    }

    fn plan(&self) -> Vec<(Partition, Label, usize)> {
        let mut plan = Vec::new();
        for (partition, per_class) in [
            (Partition::Train, self.train_per_class),
            (Partition::TestKnown, self.test_known_per_class),
            (Partition::TestUnknown, self.test_unknown_per_class),
        ] {
            for label in [Label::BonaFide, Label::Attack] {
                for i in 0..per_class {
                    plan.push((partition, label, i));
                }
            }
        }
        plan
    }
}

/// Sample a single image. `index` selects the per-image random stream.
pub fn render(cfg: &SynthConfig, partition: Partition, label: Label, index: u64) -> GrayImage {
    let seed = rng::derive_seed(cfg.seed, index);
    let mut r = rng::seeded(seed);
    let size = cfg.image_size;
    let field = gaussian_field(size, size, cfg.smoothness, &mut r);
    let overlay = match (label, partition) {
        (Label::BonaFide, _) => None,
        (Label::Attack, Partition::TestUnknown) => Some(cfg.unknown_attack),
        (Label::Attack, _) => Some(cfg.known_attack),
    };
    let phase_x = r.random::<f64>();
    let phase_y = r.random::<f64>();
    let mut px: Vec<f64> = field.iter().map(|v| 0.5 + cfg.contrast * v).collect();
    if let Some(o) = overlay {
        for y in 0..size {
            for x in 0..size {
                let p = &mut px[y * size + x];
                match o.kind {
                    OverlayKind::Halftone => {
                        let cx = ((x as f64 / o.period + phase_x).fract() - 0.5) * o.period;
                        let cy = ((y as f64 / o.period + phase_y).fract() - 0.5) * o.period;
                        if (cx * cx + cy * cy).sqrt() < 0.3 * o.period {
                            *p *= 1.0 - o.amplitude;
                        }
                    }
                    OverlayKind::Rings => {
                        let dx = x as f64 - size as f64 / 2.0 + (phase_x - 0.5) * 4.0;
                        let dy = y as f64 - size as f64 / 2.0 + (phase_y - 0.5) * 4.0;
                        let rad = (dx * dx + dy * dy).sqrt();
                        *p += 0.5 * o.amplitude * (2.0 * PI * rad / o.period).cos();
                    }
                }
            }
        }
    }
    let px = px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    GrayImage::new(size, size, px).expect("clamped intensities")
}

/// Band-limited noise image with mid-gray mean.
pub fn band_limited_noise(width: usize, height: usize, smoothness: f64, seed: u64) -> GrayImage {
    let mut r = rng::seeded(seed);
    let f = gaussian_field(width, height, smoothness, &mut r);
    GrayImage::new(width, height, f.into_iter().map(|v| (0.5 + 0.15 * v).clamp(0.0, 1.0)).collect())
        .expect("clamped intensities")
}

/// Dead-leaves texture: opaque discs with power-law radii and uniform gray
/// levels dropped until the canvas is covered. Edge-rich and strongly
/// non-Gaussian, which is what ICA needs to find oriented filters.
pub fn dead_leaves(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut r = rng::seeded(seed);
    let mut px = vec![f64::NAN; width * height];
    let mut empty = width * height;
    let (r_min, r_max) = (1.5f64, (width.min(height) as f64 / 3.0).max(2.0));
    let mut drops = 0;
    // Later discs go underneath: a pixel keeps the first disc that covers it.
    while empty > 0 && drops < 20_000 {
        drops += 1;
        // radius density proportional to r^-3 on [r_min, r_max]
        let u: f64 = r.random();
        let rad = 1.0 / (1.0 / (r_min * r_min) - u * (1.0 / (r_min * r_min) - 1.0 / (r_max * r_max))).sqrt();
        let cx = r.random::<f64>() * width as f64;
        let cy = r.random::<f64>() * height as f64;
        let gray: f64 = r.random();
        let (x0, x1) = ((cx - rad).floor().max(0.0) as usize, ((cx + rad).ceil() as usize).min(width));
        let (y0, y1) = ((cy - rad).floor().max(0.0) as usize, ((cy + rad).ceil() as usize).min(height));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let at = y * width + x;
                if dx * dx + dy * dy <= rad * rad && px[at].is_nan() {
                    px[at] = gray;
                    empty -= 1;
                }
            }
        }
    }
    let px = px.into_iter().map(|v| if v.is_nan() { 0.5 } else { v }).collect();
    GrayImage::new(width, height, px).expect("gray levels in [0,1]")
}

/// White noise low-pass filtered by a circular Gaussian, standardized to
/// zero mean and unit variance.
fn gaussian_field(w: usize, h: usize, sigma: f64, r: &mut rng::Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..w * h).map(|_| r.sample(StandardNormal)).collect();
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * white[y * w + wrap(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[wrap(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    out
}

/// Write the corpus under `out_dir` (images in `images/`, `manifest.csv`).
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let plan = cfg.plan();
    let records: Vec<SampleRecord> = plan
        .par_iter()
        .enumerate()
        .map(|(idx, &(partition, label, i))| {
            let id = format!("{}_{}_{:04}", partition, label, i);
            let rel = PathBuf::from("images").join(format!("{id}.png"));
            render(cfg, partition, label, idx as u64).save_png(&out_dir.join(&rel))?;
            Ok(SampleRecord { id, image_path: rel, label, partition, iris_center: None })
        })
        .collect::<Result<_>>()?;
    let ds = Dataset::new("synthetic", out_dir, records)?;
    write_manifest(&ds, &out_dir.join("manifest.csv"))?;
    let cfg_path = out_dir.join("synth_config.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(ds)
}

/// Power of the mean-removed image at DFT bin (`fx`, `fy`), normalized by
/// pixel count.
pub fn spectral_energy(img: &GrayImage, fx: f64, fy: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let mean = img.pixels().iter().sum::<f64>() / (w * h) as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let a = -2.0 * PI * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64);
            let v = img.get(x, y) - mean;
            re += v * a.cos();
            im += v * a.sin();
        }
    }
    (re * re + im * im) / (w * h) as f64
}

/// Summed energy at the horizontal and vertical fundamentals of a lattice
/// with the given period.
pub fn lattice_energy(img: &GrayImage, period: f64) -> f64 {
    let fx = img.width() as f64 / period;
    let fy = img.height() as f64 / period;
    spectral_energy(img, fx, 0.0) + spectral_energy(img, 0.0, fy)
}
