//! Flat little-endian parameter files.
//!
//! Layout: magic `S3CK`, `u32` version, the model config as fixed-width
//! integers (the head-norm flag as 0/1), `u32` tensor count, then per tensor `u32` name length, name
//! bytes, `u32` rank, `u32` extents and `f32` values.

use std::io::{Read, Write};

use crate::autograd::tensor::Tensor;
use crate::error::{Error, Result};
use crate::model::config::{LkaConfig, ModelConfig};
use crate::model::params::Weights;
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"S3CK";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn save<T: Scalar>(w: &mut impl Write, cfg: &ModelConfig, params: &Weights<T>) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [cfg.in_channels, cfg.channels, cfg.blocks, cfg.clusters, cfg.lka.kernel, cfg.lka.dilation] {
        put_u32(w, v)?;
    }
    put_u32(w, cfg.lka.inception.len())?;
    for &r in &cfg.lka.inception {
        put_u32(w, r)?;
    }
    put_u32(w, cfg.deform_kernel)?;
    put_u32(w, usize::from(cfg.head_norm))?;
    w.write_all(&cfg.seed.to_le_bytes())?;
    let entries = params.entries();
    put_u32(w, entries.len())?;
    for (name, t) in entries {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &e in t.shape() {
            put_u32(w, e)?;
        }
        for v in t.data() {
            w.write_all(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load<T: Scalar>(r: &mut impl Read) -> Result<(ModelConfig, Weights<T>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut head = [0usize; 6];
    for v in &mut head {
        *v = get_u32(r)?;
    }
    let n_inc = get_u32(r)?;
    let inception = (0..n_inc).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let deform_kernel = get_u32(r)?;
    let head_norm = match get_u32(r)? {
        0 => false,
        1 => true,
        v => return Err(Error::Checkpoint(format!("bad head-norm flag {v}"))),
    };
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    let cfg = ModelConfig {
        in_channels: head[0],
        channels: head[1],
        blocks: head[2],
        clusters: head[3],
        lka: LkaConfig { kernel: head[4], dilation: head[5], inception },
        deform_kernel,
        head_norm,
        seed: u64::from_le_bytes(seed),
    };
    let mut params: Weights<T> = Weights::init(&cfg)?;
    let expected: Vec<(String, Vec<usize>)> =
        params.entries().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count = get_u32(r)?;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("{count} tensors, layout needs {}", expected.len())));
    }
    for (slot, (want_name, want_shape)) in params.slots_mut().into_iter().zip(expected) {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        if name != want_name.as_bytes() {
            return Err(Error::Checkpoint(format!(
                "expected tensor `{want_name}`, found `{}`",
                String::from_utf8_lossy(&name)
            )));
        }
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        if shape != want_shape {
            return Err(Error::Checkpoint(format!("`{want_name}` has shape {shape:?}, expected {want_shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        *slot = Tensor::new(&shape, data)?;
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let cfg = ModelConfig { channels: 8, clusters: 3, blocks: 1, seed: 5, ..ModelConfig::default() };
        let params: Weights<f32> = Weights::init(&cfg).unwrap();
        let mut buf = Vec::new();
        save(&mut buf, &cfg, &params).unwrap();
        assert_eq!(&buf[..4], b"S3CK");
        let (cfg2, params2) = load::<f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(params2, params);
        buf[0] = b'X';
        assert!(matches!(load::<f32>(&mut buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
