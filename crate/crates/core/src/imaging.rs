//! Image decoding, iris-centred cropping, and dataset manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Rec. 601 luma weights used when a colour file is decoded.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const MANIFEST_HEADER: &str = "id,image_path,label,partition,center_x,center_y";

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::validation(format!(
                "pixel buffer has {} values, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::validation(format!("intensity {bad} outside [0,1]")));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    /// Intensity at column `x`, row `y`.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    /// Decode an 8-bit (or 16-bit) PNG/PGM file. Colour inputs are reduced
    /// with the Rec. 601 luma weights.
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Decode { message, .. } => Error::Decode { path: path.to_path_buf(), message },
            other => other,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory(bytes).map_err(|e| Error::Decode {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let pixels: Vec<f64> = match decoded {
            image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            image::DynamicImage::ImageLuma16(buf) => {
                buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
            }
            other => other
                .to_rgb8()
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0;
                    let luma = LUMA_WEIGHTS[0] * r as f64 + LUMA_WEIGHTS[1] * g as f64 + LUMA_WEIGHTS[2] * b as f64;
                    (luma / 255.0).clamp(0.0, 1.0)
                })
                .collect(),
        };
        Self::new(w, h, pixels)
    }

    /// Quantize to 8 bits and write as PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Crop a `size`x`size` window centred on `center` (x = column, y = row).
/// Windows that would leave the image are shifted inward, never padded.
pub fn crop_centered(img: &GrayImage, center: (f64, f64), size: usize) -> Result<GrayImage> {
    if size == 0 {
        return Err(Error::validation("crop size must be at least 1"));
    }
    if size > img.width.min(img.height) {
        return Err(Error::ImageSmallerThanCrop { width: img.width, height: img.height, size });
    }
    let x0 = window_start(center.0, size, img.width);
    let y0 = window_start(center.1, size, img.height);
    let mut pixels = Vec::with_capacity(size * size);
    for y in y0..y0 + size {
        let row = y * img.width;
        pixels.extend_from_slice(&img.pixels[row + x0..row + x0 + size]);
    }
    Ok(GrayImage { width: size, height: size, pixels })
}

/// First row/column of a centred window, clamped to `[0, extent - size]`.
pub fn window_start(center: f64, size: usize, extent: usize) -> usize {
    let start = center.floor() as i64 - (size / 2) as i64;
    start.clamp(0, (extent - size) as i64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    BonaFide,
    Attack,
}

impl Label {
    /// Class index used by the classifiers: bona fide is the positive class.
    pub fn index(self) -> usize {
        match self {
            Label::Attack => 0,
            Label::BonaFide => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::BonaFide
        } else {
            Label::Attack
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::BonaFide => "live",
            Label::Attack => "attack",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "live" | "bona_fide" => Ok(Label::BonaFide),
            "attack" => Ok(Label::Attack),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

impl serde::Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Train,
    Validation,
    TestKnown,
    TestUnknown,
}

impl Partition {
    pub const ALL: [Partition; 4] =
        [Partition::Train, Partition::Validation, Partition::TestKnown, Partition::TestUnknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::TestKnown => "test_known",
            Partition::TestUnknown => "test_unknown",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(self, Partition::TestKnown | Partition::TestUnknown)
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Partition::Train),
            "validation" => Ok(Partition::Validation),
            "test_known" => Ok(Partition::TestKnown),
            "test_unknown" => Ok(Partition::TestUnknown),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub label: Label,
    pub partition: Partition,
    pub iris_center: Option<(f64, f64)>,
}

impl SampleRecord {
    /// Crop centre for `img`, falling back to the geometric centre.
    pub fn center_for(&self, img: &GrayImage) -> Result<(f64, f64)> {
        match self.iris_center {
            None => Ok(img.center()),
            Some((x, y)) => {
                if x < 0.0 || y < 0.0 || x >= img.width as f64 || y >= img.height as f64 {
                    Err(Error::validation(format!(
                        "iris center ({x},{y}) of {} outside {}x{} image",
                        self.id, img.width, img.height
                    )))
                } else {
                    Ok((x, y))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Directory that relative image paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Result<Self> {
        let ds = Self { name: name.into(), root: root.into(), records };
        let mut seen = HashSet::new();
        for (i, r) in ds.records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(format!("duplicate id {:?} at record {}", r.id, i + 1)));
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.root.join(&record.image_path)
        }
    }

    pub fn in_partition(&self, partition: Partition) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.partition == partition)
    }

    pub fn count(&self, partition: Partition, label: Label) -> usize {
        self.in_partition(partition).filter(|r| r.label == label).count()
    }

    /// Concatenate datasets into one. Ids are prefixed with the source
    /// dataset name and image paths made absolute; partitions are kept.
    pub fn combine(name: impl Into<String>, parts: &[Dataset]) -> Result<Dataset> {
        let mut records = Vec::new();
        for ds in parts {
            for r in &ds.records {
                records.push(SampleRecord {
                    id: format!("{}/{}", ds.name, r.id),
                    image_path: ds.image_path(r),
                    ..r.clone()
                });
            }
        }
        Dataset::new(name, PathBuf::new(), records)
    }

    /// Labels of one partition, read through the audit log.
    pub fn labels(&self, partition: Partition, stage: &str, audit: &AccessAudit) -> Vec<Label> {
        audit.record(stage, partition);
        self.in_partition(partition).map(|r| r.label).collect()
    }
}

/// Log of label reads per (stage, partition). Test labels may only be read
/// by the evaluation stage; [`AccessAudit::test_reads_outside`] reports
/// violations.
#[derive(Debug, Default)]
pub struct AccessAudit {
    events: Mutex<Vec<(String, Partition)>>,
}

impl AccessAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, stage: &str, partition: Partition) {
        self.events.lock().expect("audit poisoned").push((stage.to_string(), partition));
    }

    pub fn events(&self) -> Vec<(String, Partition)> {
        self.events.lock().expect("audit poisoned").clone()
    }

    /// Test-partition label reads by any stage other than `allowed`.
    pub fn test_reads_outside(&self, allowed: &str) -> Vec<(String, Partition)> {
        self.events().into_iter().filter(|(stage, p)| p.is_test() && stage != allowed).collect()
    }
}

/// Parse a manifest CSV. Relative image paths resolve against the
/// manifest's directory; the dataset is named after the file stem.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, name, root)
}

pub fn parse_manifest(text: &str, name: impl Into<String>, root: impl Into<PathBuf>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let expected: Vec<&str> = MANIFEST_HEADER.split(',').collect();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse { line: 1, message: format!("expected header {MANIFEST_HEADER:?}, found {got:?}") });
    }

    let mut records = Vec::new();
    let mut first_line: BTreeMap<String, usize> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if row.len() != expected.len() {
            return Err(Error::Parse { line, message: format!("expected 6 fields, found {}", row.len()) });
        }
        let field = |k: usize| row[k].trim();
        let id = field(0);
        if id.is_empty() {
            return Err(Error::Parse { line, message: "empty id".into() });
        }
        if first_line.insert(id.to_string(), line).is_some() {
            return Err(Error::validation(format!("duplicate id {id:?} at line {line}")));
        }
        let label = field(2).parse::<Label>().map_err(|message| Error::Parse { line, message })?;
        let partition = field(3).parse::<Partition>().map_err(|message| Error::Parse { line, message })?;
        let coord = |k: usize| -> Result<Option<f64>> {
            let s = field(k);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| Error::Parse { line, message: format!("bad coordinate {s:?}") })
        };
        let iris_center = match (coord(4)?, coord(5)?) {
            (Some(x), Some(y)) => Some((x, y)),
            (None, None) => None,
            _ => return Err(Error::Parse { line, message: "center_x and center_y must both be set or both empty".into() }),
        };
        records.push(SampleRecord { id: id.to_string(), image_path: PathBuf::from(field(1)), label, partition, iris_center });
    }
    Dataset::new(name, root, records)
}

pub fn manifest_to_string(ds: &Dataset) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in &ds.records {
        let (cx, cy) = match r.iris_center {
            Some((x, y)) => (x.to_string(), y.to_string()),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            r.image_path.display(),
            r.label,
            r.partition,
            cx,
            cy
        ));
    }
    out
}

pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(manifest_to_string(ds).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Move `round(fraction * |train|)` train records into the validation
/// partition. The quota is split across labels by largest remainder and each
/// label's records are picked by a seeded shuffle.
pub fn split_validation(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::validation(format!("validation fraction {fraction} not in (0,1)")));
    }
    let train: Vec<usize> = (0..ds.records.len()).filter(|&i| ds.records[i].partition == Partition::Train).collect();
    if train.is_empty() {
        return Err(Error::validation("dataset has no train records"));
    }
    let total = (fraction * train.len() as f64).round() as usize;

    let by_label: Vec<(Label, Vec<usize>)> = [Label::BonaFide, Label::Attack]
        .into_iter()
        .map(|l| (l, train.iter().copied().filter(|&i| ds.records[i].label == l).collect()))
        .collect();
    let quotas = largest_remainder(&by_label.iter().map(|(_, v)| v.len()).collect::<Vec<_>>(), fraction, total);

    let mut out = ds.clone();
    let mut rng = rng::seeded(seed);
    for ((_, mut members), quota) in by_label.into_iter().zip(quotas) {
        members.shuffle(&mut rng);
        for &i in members.iter().take(quota) {
            out.records[i].partition = Partition::Validation;
        }
    }
    Ok(out)
}

/// Integer allocation of `total` proportional to `sizes * fraction`.
/// Leftover units go to the largest fractional parts, ties to the first group.
pub fn largest_remainder(sizes: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let exact: Vec<f64> = sizes.iter().map(|&n| n as f64 * fraction).collect();
    let mut alloc: Vec<usize> = exact.iter().zip(sizes).map(|(e, &n)| (e.floor() as usize).min(n)).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut assigned: usize = alloc.iter().sum();
    while assigned < total {
        let mut progressed = false;
        for &g in &order {
            if assigned < total && alloc[g] < sizes[g] {
                alloc[g] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    alloc
}
