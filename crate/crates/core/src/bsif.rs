//! Binarized statistical image features.
//!
//! Each kernel `w_k` of an `l`x`l`x`n` bank is correlated with the image,
//! `s_k(i,j) = sum_u sum_v w_k(u,v) I(i+u, j+v)`, and the response signs are
//! packed into an n-bit code `B(i,j) = sum_k b_k(i,j) 2^k` with
//! `b_k = 1` iff `s_k >= 0`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;

pub const BANK_MAGIC: &[u8; 4] = b"BSF1";

/// Kernel sides of the view grid.
pub const KERNEL_SIDES: [usize; 8] = [3, 5, 7, 9, 11, 13, 15, 17];
/// Bit depths of the view grid.
pub const BIT_DEPTHS: std::ops::RangeInclusive<usize> = 5..=12;

/// Number of views: the raw image plus every feasible (l, n) bank.
pub const VIEW_COUNT: usize = 61;

/// How `I(i+u, j+v)` is read past the image edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    /// Circular indexing; output size equals input size with no synthetic edges.
    #[default]
    Wrap,
    /// Clamp to the nearest edge pixel.
    Replicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    l: usize,
    n: usize,
    /// `n * l * l` coefficients, kernel-major then row-major.
    kernels: Vec<f64>,
}

impl FilterBank {
    pub fn new(l: usize, n: usize, kernels: Vec<f64>) -> Result<Self> {
        validate_shape(l, n)?;
        if kernels.len() != n * l * l {
            return Err(Error::validation(format!(
                "filter bank {l}x{l}x{n} needs {} coefficients, got {}",
                n * l * l,
                kernels.len()
            )));
        }
        if kernels.iter().any(|w| !w.is_finite()) {
            return Err(Error::validation("filter coefficients must be finite"));
        }
        Ok(Self { l, n, kernels })
    }

    pub fn side(&self) -> usize {
        self.l
    }

    pub fn depth(&self) -> usize {
        self.n
    }

    pub fn bank_id(&self) -> String {
        format!("{0}x{0}x{1}", self.l, self.n)
    }

    pub fn view(&self) -> ViewId {
        ViewId::Bsif { l: self.l as u8, n: self.n as u8 }
    }

    pub fn kernel(&self, k: usize) -> &[f64] {
        let sz = self.l * self.l;
        &self.kernels[k * sz..(k + 1) * sz]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.kernels
    }

    pub fn negated(&self) -> FilterBank {
        FilterBank { kernels: self.kernels.iter().map(|w| -w).collect(), ..self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 8 * self.kernels.len());
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_u32::<LittleEndian>(self.l as u32)?;
        w.write_u32::<LittleEndian>(self.n as u32)?;
        for &c in &self.kernels {
            w.write_f64::<LittleEndian>(c)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated("filter bank"))?;
        if &magic != BANK_MAGIC {
            return Err(Error::BadMagic { expected: "filter bank", found: magic });
        }
        let l = r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated("filter bank"))? as usize;
        let n = r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated("filter bank"))? as usize;
        validate_shape(l, n)?;
        let mut kernels = vec![0.0; n * l * l];
        r.read_f64_into::<LittleEndian>(&mut kernels).map_err(|_| Error::Truncated("filter bank"))?;
        Self::new(l, n, kernels)
    }
}

fn validate_shape(l: usize, n: usize) -> Result<()> {
    if l % 2 == 0 || !(3..=17).contains(&l) {
        return Err(Error::validation(format!("kernel side {l} must be odd and within 3..=17")));
    }
    if !BIT_DEPTHS.contains(&n) {
        return Err(Error::validation(format!("bit depth {n} must be within 5..=12")));
    }
    if n > l * l - 1 {
        return Err(Error::validation(format!("bit depth {n} exceeds {} for a {l}x{l} bank", l * l - 1)));
    }
    Ok(())
}

/// One input representation of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewId {
    Raw,
    Bsif { l: u8, n: u8 },
}

impl ViewId {
    pub fn bsif(l: usize, n: usize) -> Self {
        ViewId::Bsif { l: l as u8, n: n as u8 }
    }

    /// Position in [`enumerate_views`]; stable across runs.
    pub fn index(&self) -> usize {
        enumerate_views().iter().position(|v| v == self).expect("view belongs to the universe")
    }

    pub fn is_feasible(&self) -> bool {
        match *self {
            ViewId::Raw => true,
            ViewId::Bsif { l, n } => validate_shape(l as usize, n as usize).is_ok(),
        }
    }

    /// File name of the bank backing this view.
    pub fn bank_file_name(&self) -> Option<String> {
        match *self {
            ViewId::Raw => None,
            ViewId::Bsif { l, n } => Some(format!("bsif_{l}x{l}x{n}.bnk")),
        }
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewId::Raw => f.write_str("raw"),
            ViewId::Bsif { l, n } => write!(f, "bsif_{l}x{l}x{n}"),
        }
    }
}

impl FromStr for ViewId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "raw" {
            return Ok(ViewId::Raw);
        }
        let bad = || Error::validation(format!("bad view id {s:?}"));
        let body = s.strip_prefix("bsif_").ok_or_else(bad)?;
        let parts: Vec<&str> = body.split('x').collect();
        if parts.len() != 3 || parts[0] != parts[1] {
            return Err(bad());
        }
        let l: usize = parts[0].parse().map_err(|_| bad())?;
        let n: usize = parts[2].parse().map_err(|_| bad())?;
        validate_shape(l, n)?;
        Ok(ViewId::bsif(l, n))
    }
}

impl serde::Serialize for ViewId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ViewId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Raw first, then every feasible bank sorted by (l, n).
pub fn enumerate_views() -> Vec<ViewId> {
    let mut views = vec![ViewId::Raw];
    for l in KERNEL_SIDES {
        for n in BIT_DEPTHS {
            if n <= l * l - 1 {
                views.push(ViewId::bsif(l, n));
            }
        }
    }
    views
}

/// Correlate `img` with one `l`x`l` kernel, anchored at the top-left tap.
pub fn filter_response(img: &GrayImage, kernel: &[f64], border: BorderMode) -> Result<Vec<f64>> {
    let l = (kernel.len() as f64).sqrt() as usize;
    if l * l != kernel.len() || l % 2 == 0 {
        return Err(Error::validation(format!("kernel with {} taps is not odd-square", kernel.len())));
    }
    let (w, h) = (img.width(), img.height());
    if l > w.min(h) {
        return Err(Error::KernelTooLarge { kernel: l, width: w, height: h });
    }
    let ext = Extended::new(img, l, border);
    Ok(ext.correlate(kernel, l))
}

/// Image extended by `l - 1` rows and columns past the bottom/right edge so
/// every tap reads a contiguous row slice.
struct Extended {
    width: usize,
    height: usize,
    stride: usize,
    data: Vec<f64>,
}

impl Extended {
    fn new(img: &GrayImage, l: usize, border: BorderMode) -> Self {
        let (w, h) = (img.width(), img.height());
        let stride = w + l - 1;
        let rows = h + l - 1;
        let pick = |idx: usize, extent: usize| match border {
            BorderMode::Wrap => idx % extent,
            BorderMode::Replicate => idx.min(extent - 1),
        };
        let mut data = Vec::with_capacity(stride * rows);
        for y in 0..rows {
            let sy = pick(y, h);
            for x in 0..stride {
                data.push(img.get(pick(x, w), sy));
            }
        }
        Self { width: w, height: h, stride, data }
    }

    // Per pixel the taps are accumulated in (u, v) lexicographic order
    // starting from 0.0, identical to a naive double loop.
    fn correlate(&self, kernel: &[f64], l: usize) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; w * h];
        for u in 0..l {
            for v in 0..l {
                let tap = kernel[u * l + v];
                for i in 0..h {
                    let src = &self.data[(i + u) * self.stride + v..][..w];
                    let dst = &mut out[i * w..(i + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += tap * s;
                    }
                }
            }
        }
        out
    }
}

/// n-bit code image with the same dimensions as its source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BsifImage {
    pub width: usize,
    pub height: usize,
    pub n: usize,
    pub codes: Vec<u16>,
}

impl BsifImage {
    pub fn max_code(&self) -> u16 {
        ((1u32 << self.n) - 1) as u16
    }

    /// Single normalized channel, `code / (2^n - 1)`.
    pub fn to_cnn_input(&self) -> GrayImage {
        bsif_to_cnn_input(self)
    }

    /// Alternative encoding: one binary plane per bit, least significant first.
    pub fn bit_planes(&self) -> Vec<GrayImage> {
        (0..self.n)
            .map(|k| {
                let px = self.codes.iter().map(|&c| ((c >> k) & 1) as f64).collect();
                GrayImage::new(self.width, self.height, px).expect("binary plane in range")
            })
            .collect()
    }
}

pub fn bsif_transform(img: &GrayImage, bank: &FilterBank) -> Result<BsifImage> {
    bsif_transform_with(img, bank, BorderMode::Wrap)
}

pub fn bsif_transform_with(img: &GrayImage, bank: &FilterBank, border: BorderMode) -> Result<BsifImage> {
    let (w, h) = (img.width(), img.height());
    let l = bank.side();
    if l > w.min(h) {
        return Err(Error::KernelTooLarge { kernel: l, width: w, height: h });
    }
    let ext = Extended::new(img, l, border);
    let mut codes = vec![0u16; w * h];
    for k in 0..bank.depth() {
        let response = ext.correlate(bank.kernel(k), l);
        let bit = 1u16 << k;
        for (c, s) in codes.iter_mut().zip(&response) {
            if *s >= 0.0 {
                *c |= bit;
            }
        }
    }
    Ok(BsifImage { width: w, height: h, n: bank.depth(), codes })
}

pub fn bsif_to_cnn_input(b: &BsifImage) -> GrayImage {
    let scale = b.max_code() as f64;
    let px = b.codes.iter().map(|&c| c as f64 / scale).collect();
    GrayImage::new(b.width, b.height, px).expect("codes bounded by 2^n - 1")
}
