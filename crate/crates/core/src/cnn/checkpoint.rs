//! Checkpoint format: magic `MVPC`, u32 version, view id (u32 length +
//! UTF-8), u32 input size, architecture fields as u32, then every parameter
//! tensor and the batch-norm running statistics as little-endian f32 in
//! fixed layer order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ArchConfig, CnnModel, Params, PoolSpec, RunningStats, BN1_BETA, BN2_BETA, PARAM_COUNT};
use crate::bsif::ViewId;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVPC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_model(model: &CnnModel<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<CnnModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut bytes.as_slice())
}

fn write_model<W: Write>(m: &CnnModel<f32>, w: &mut W) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let view = m.view.to_string();
    w.write_u32::<LittleEndian>(view.len() as u32)?;
    w.write_all(view.as_bytes())?;
    let a = &m.arch;
    w.write_u32::<LittleEndian>(a.input_size as u32)?;
    for v in [
        a.in_channels,
        a.conv1_filters,
        a.conv2_filters,
        a.kernel,
        a.pool1.window,
        a.pool1.stride,
        a.pool2.window,
        a.pool2.stride,
        a.hidden,
    ] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    for (i, t) in m.params.tensors.iter().enumerate() {
        write_floats(w, t)?;
        if i == BN1_BETA {
            write_floats(w, &m.stats.mean1)?;
            write_floats(w, &m.stats.var1)?;
        }
        if i == BN2_BETA {
            write_floats(w, &m.stats.mean2)?;
            write_floats(w, &m.stats.var2)?;
        }
    }
    Ok(())
}

fn write_floats<W: Write>(w: &mut W, v: &[f32]) -> std::io::Result<()> {
    for &x in v {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_floats<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut v = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut v).map_err(|_| Error::Truncated("checkpoint"))?;
    Ok(v)
}

fn read_model<R: Read>(r: &mut R) -> Result<CnnModel<f32>> {
    let trunc = |_| Error::Truncated("checkpoint");
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "checkpoint", found: magic });
    }
    let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { what: "checkpoint", version });
    }
    let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    if len > 64 {
        return Err(Error::validation("checkpoint view id too long"));
    }
    let mut view = vec![0u8; len];
    r.read_exact(&mut view).map_err(trunc)?;
    let view: ViewId = String::from_utf8(view).map_err(|_| Error::validation("view id is not UTF-8"))?.parse()?;
    let mut fields = [0usize; 10];
    for f in fields.iter_mut() {
        *f = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    }
    let arch = ArchConfig {
        input_size: fields[0],
        in_channels: fields[1],
        conv1_filters: fields[2],
        conv2_filters: fields[3],
        kernel: fields[4],
        pool1: PoolSpec { window: fields[5], stride: fields[6] },
        pool2: PoolSpec { window: fields[7], stride: fields[8] },
        hidden: fields[9],
    };
    let lens = arch.param_lengths()?;
    let mut tensors: [Vec<f32>; PARAM_COUNT] = Default::default();
    let mut stats = RunningStats { mean1: vec![], var1: vec![], mean2: vec![], var2: vec![] };
    for i in 0..PARAM_COUNT {
        tensors[i] = read_floats(r, lens[i])?;
        if i == BN1_BETA {
            stats.mean1 = read_floats(r, arch.conv1_filters)?;
            stats.var1 = read_floats(r, arch.conv1_filters)?;
        }
        if i == BN2_BETA {
            stats.mean2 = read_floats(r, arch.conv2_filters)?;
            stats.var2 = read_floats(r, arch.conv2_filters)?;
        }
    }
    if stats.var1.iter().chain(&stats.var2).any(|v| !(*v > 0.0)) {
        return Err(Error::validation("running variance must be positive"));
    }
    Ok(CnnModel { view, arch, params: Params { tensors }, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{predict_view, Sample};
    use crate::imaging::Label;

    fn model(view: ViewId, channels: usize) -> CnnModel<f32> {
        let mut m = CnnModel::<f32>::new(view, ArchConfig::standard(28, channels), 9).unwrap();
        m.stats.mean1[0] = 0.25;
        m.stats.var2[3] = 1.75;
        m
    }

    fn samples(channels: usize) -> Vec<Sample> {
        (0..3)
            .map(|i| Sample {
                id: format!("x{i}"),
                input: (0..channels * 784).map(|p| ((p * (i + 3)) % 17) as f32 / 17.0).collect(),
                label: Label::Attack,
            })
            .collect()
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mvpc");
        let m = model(ViewId::bsif(5, 7), 1);
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
        let a = predict_view(&m, &samples(1)).unwrap();
        let b = predict_view(&back, &samples(1)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.score - y.score).abs() <= 1e-12);
        }
    }

    #[test]
    fn truncated_and_foreign_files() {
        let mut buf = Vec::new();
        write_model(&model(ViewId::Raw, 1), &mut buf).unwrap();
        let short = &buf[..buf.len() - 10];
        assert!(matches!(read_model(&mut &short[..]), Err(Error::Truncated(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Version { .. })));
    }

    #[test]
    fn bit_plane_model_rejects_single_channel_input() {
        let m = model(ViewId::bsif(5, 7), 7);
        let err = predict_view(&m, &samples(1)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }
}
