//! Regenerating the 60 BSIF filter banks from a patch corpus.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvpad_core::bsif::{enumerate_views, KERNEL_SIDES};
use mvpad_core::ica::{sample_patches, PatchWhitening, PATCHES_PER_TAP};
use mvpad_core::rng::derive_seed;
use mvpad_core::{GrayImage, ViewId};
use rayon::prelude::*;

use crate::store;

/// Patches drawn per kernel size, never below the whitening minimum.
pub const MIN_PATCHES: usize = 20_000;

/// Decode every PNG/PNM image in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<GrayImage>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading patch corpus {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
            matches!(ext.as_str(), "png" | "pgm" | "ppm" | "pnm")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("patch corpus {} contains no images", dir.display());
    }
    paths.iter().map(|p| Ok(GrayImage::open(p)?)).collect()
}

/// Learn and write every feasible `bsif_{l}x{l}x{n}.bnk`. One whitening per
/// kernel size is shared by all its depths.
pub fn gen_filters(corpus: &Path, out: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let images = load_corpus(corpus)?;
    let views = enumerate_views();
    let written: Vec<Vec<PathBuf>> = KERNEL_SIDES
        .par_iter()
        .map(|&l| -> Result<Vec<PathBuf>> {
            let count = (PATCHES_PER_TAP * l * l).max(MIN_PATCHES);
            let seed_l = derive_seed(seed, l as u64);
            let patches = sample_patches(&images, l, count, seed_l)?;
            let white = PatchWhitening::new(&patches, l).with_context(|| format!("whitening {l}x{l} patches"))?;
            let mut files = Vec::new();
            for v in views.iter().filter(|v| matches!(v, ViewId::Bsif { l: vl, .. } if *vl as usize == l)) {
                let ViewId::Bsif { n, .. } = *v else { unreachable!() };
                let bank = white.learn(n as usize, derive_seed(seed_l, n as u64)).with_context(|| format!("learning {v}"))?;
                let mut bytes = Vec::new();
                bank.write_to(&mut bytes)?;
                let path = out.join(v.bank_file_name().expect("bsif view"));
                store::write_atomic(&path, &bytes)?;
                files.push(path);
            }
            log::info!("gen-filters: {} banks of side {l}", files.len());
            Ok(files)
        })
        .collect::<Result<_>>()?;
    Ok(written.into_iter().flatten().collect())
}
