//! Per-sample input maps (raw crop plus BSIF code crops), cached under
//! content-addressed names.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, Context, Result};
use mvpad_core::bsif::{bsif_to_cnn_input, bsif_transform_with, BorderMode};
use mvpad_core::imaging::crop_centered;
use mvpad_core::{Dataset, FilterBank, GrayImage, SampleRecord, ViewId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Encoding, ExperimentConfig};
use crate::store::{self, Layout};

pub const MAP_MAGIC: &[u8; 4] = b"MVIM";
pub const MAP_VERSION: u32 = 1;

/// `channels x size x size` network input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMap {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
}

impl InputMap {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MAP_MAGIC);
        for v in [MAP_VERSION, self.channels as u32, self.size as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAP_MAGIC {
            bail!("not an input map file");
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        if word(4) != MAP_VERSION as usize {
            bail!("unsupported input map version {}", word(4));
        }
        let (channels, size) = (word(8), word(12));
        let n = channels.checked_mul(size).and_then(|v| v.checked_mul(size)).and_then(|v| v.checked_mul(4));
        if n.and_then(|n| n.checked_add(16)) != Some(bytes.len()) {
            bail!("truncated input map: {} bytes for {channels}x{size}x{size}", bytes.len());
        }
        let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { channels, size, data })
    }

    fn from_planes(planes: &[GrayImage]) -> Self {
        let size = planes[0].width();
        let data = planes.iter().flat_map(|p| p.pixels().iter().map(|&v| v as f32)).collect();
        Self { channels: planes.len(), size, data }
    }
}

/// Banks for the configured views with a digest of each bank's file.
pub struct BankSet {
    banks: BTreeMap<ViewId, (FilterBank, String)>,
}

impl BankSet {
    pub fn load(dir: &Path, views: &[ViewId]) -> Result<Self> {
        let mut banks = BTreeMap::new();
        let mut missing = Vec::new();
        for &v in views {
            let Some(file) = v.bank_file_name() else { continue };
            let path = dir.join(&file);
            match std::fs::read(&path) {
                Ok(bytes) => {
                    let bank = FilterBank::read_from(&mut bytes.as_slice()).with_context(|| format!("reading {}", path.display()))?;
                    if bank.view() != v {
                        bail!("{} holds bank {}, expected {v}", path.display(), bank.view());
                    }
                    banks.insert(v, (bank, store::sha256_hex(&bytes)));
                }
                Err(_) => missing.push(file),
            }
        }
        if !missing.is_empty() {
            bail!("missing filter banks in {}: {}", dir.display(), missing.join(", "));
        }
        Ok(Self { banks })
    }

    fn get(&self, v: ViewId) -> Option<&(FilterBank, String)> {
        self.banks.get(&v)
    }
}

/// Input map of one view for a decoded image.
pub fn view_input(
    img: &GrayImage,
    center: (f64, f64),
    view: ViewId,
    bank: Option<&FilterBank>,
    crop: usize,
    border: BorderMode,
    encoding: Encoding,
) -> Result<InputMap> {
    let planes = match (view, bank) {
        (ViewId::Raw, _) => vec![crop_centered(img, center, crop)?],
        (ViewId::Bsif { .. }, Some(bank)) => {
            let codes = bsif_transform_with(img, bank, border)?;
            match encoding {
                Encoding::Normalized => vec![crop_centered(&bsif_to_cnn_input(&codes), center, crop)?],
                Encoding::BitPlanes => {
                    codes.bit_planes().iter().map(|p| crop_centered(p, center, crop)).collect::<mvpad_core::Result<_>>()?
                }
            }
        }
        (ViewId::Bsif { .. }, None) => bail!("no filter bank for {view}"),
    };
    Ok(InputMap::from_planes(&planes))
}

#[derive(Clone, Copy)]
struct KeyParams<'a> {
    crop: usize,
    border: BorderMode,
    encoding: Encoding,
    banks: &'a BankSet,
}

/// Hash of everything the map depends on: image bytes, view, bank
/// coefficients, crop window and encoding.
fn cache_key(image_digest: &str, record: &SampleRecord, view: ViewId, p: KeyParams) -> String {
    let mut h = Sha256::new();
    h.update(b"mvim1\0");
    h.update(image_digest.as_bytes());
    h.update(view.to_string().as_bytes());
    h.update([0]);
    if let Some((_, digest)) = p.banks.get(view) {
        h.update(digest.as_bytes());
    }
    h.update((p.crop as u64).to_le_bytes());
    match record.iris_center {
        Some((x, y)) => {
            h.update([1]);
            h.update(x.to_le_bytes());
            h.update(y.to_le_bytes());
        }
        None => h.update([0]),
    }
    h.update(format!("{:?}/{:?}", p.border, p.encoding).as_bytes());
    hex::encode(h.finalize())
}

pub fn cache_path(layout: &Layout, key: &str) -> PathBuf {
    layout.cache().join(&key[..2]).join(format!("{key}.mvim"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub sample_id: String,
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformStats {
    pub samples: usize,
    pub maps: usize,
    pub cache_hits: usize,
    pub computed: usize,
    pub errors: Vec<SampleError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexRow {
    sample_id: String,
    view: String,
    key: String,
}

/// Build (or reuse) every configured view's map for every sample.
pub fn run_transform(cfg: &ExperimentConfig, ds: &Dataset, layout: &Layout) -> Result<TransformStats> {
    let views = cfg.views();
    let banks = BankSet::load(&cfg.filters, &views)?;
    let params = KeyParams { crop: cfg.crop_size, border: cfg.border, encoding: cfg.encoding, banks: &banks };
    let hits = AtomicUsize::new(0);
    let computed = AtomicUsize::new(0);

    let per_sample: Vec<std::result::Result<Vec<IndexRow>, SampleError>> = ds
        .records
        .par_iter()
        .map(|rec| {
            let path = ds.image_path(rec);
            let fail = |e: String| SampleError { sample_id: rec.id.clone(), path: path.display().to_string(), error: e };
            let bytes = std::fs::read(&path).map_err(|e| fail(e.to_string()))?;
            let digest = store::sha256_hex(&bytes);
            let keys: Vec<String> = views.iter().map(|&v| cache_key(&digest, rec, v, params)).collect();
            let missing: Vec<usize> = (0..views.len()).filter(|&i| !cache_path(layout, &keys[i]).is_file()).collect();
            hits.fetch_add(views.len() - missing.len(), Ordering::Relaxed);
            if !missing.is_empty() {
                let img = GrayImage::decode(&bytes).map_err(|e| fail(e.to_string()))?;
                let center = rec.center_for(&img).map_err(|e| fail(e.to_string()))?;
                for i in missing {
                    let v = views[i];
                    let map = view_input(&img, center, v, banks.get(v).map(|b| &b.0), cfg.crop_size, cfg.border, cfg.encoding)
                        .map_err(|e| fail(format!("{v}: {e}")))?;
                    store::write_atomic(&cache_path(layout, &keys[i]), &map.to_bytes()).map_err(|e| fail(e.to_string()))?;
                    computed.fetch_add(1, Ordering::Relaxed);
                }
            }
            Ok(views.iter().zip(keys).map(|(v, key)| IndexRow { sample_id: rec.id.clone(), view: v.to_string(), key }).collect())
        })
        .collect();

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for r in per_sample {
        match r {
            Ok(mut v) => rows.append(&mut v),
            Err(e) => errors.push(e),
        }
    }
    write_csv(&layout.index(), &rows)?;
    write_csv(&layout.transform().join("errors.csv"), &errors)?;
    let stats = TransformStats {
        samples: ds.len(),
        maps: rows.len(),
        cache_hits: hits.into_inner(),
        computed: computed.into_inner(),
        errors,
    };
    store::write_json(&layout.transform().join("stats.json"), &stats)?;
    log::info!(
        "transform: {} maps for {} samples ({} cache hits, {} computed, {} failed samples)",
        stats.maps,
        stats.samples,
        stats.cache_hits,
        stats.computed,
        stats.errors.len()
    );
    Ok(stats)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv flush: {e}"))?;
    store::write_atomic(path, &bytes)
}

/// Lookup from (sample id, view) to cached map.
pub struct InputIndex {
    layout: Layout,
    keys: HashMap<(String, ViewId), String>,
}

impl InputIndex {
    pub fn open(layout: &Layout) -> Result<Self> {
        store::require_file(&layout.index(), "mvpad transform")?;
        let mut r = csv::Reader::from_path(layout.index())?;
        let mut keys = HashMap::new();
        for row in r.deserialize() {
            let row: IndexRow = row?;
            keys.insert((row.sample_id, row.view.parse::<ViewId>()?), row.key);
        }
        Ok(Self { layout: layout.clone(), keys })
    }

    pub fn load(&self, sample_id: &str, view: ViewId) -> Result<InputMap> {
        let key = self
            .keys
            .get(&(sample_id.to_string(), view))
            .with_context(|| format!("no cached {view} map for sample {sample_id}; rerun transform"))?;
        let path = cache_path(&self.layout, key);
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        InputMap::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
    }
}
