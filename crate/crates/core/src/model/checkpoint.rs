//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   b"NOPECKPT"
//! version      u32       1
//! config_len   u64       byte length of the config JSON
//! config       bytes     ModelConfig as UTF-8 JSON
//! n_tensors    u32
//! per tensor, in ModelParams::tensors() order:
//!   name_len   u32
//!   name       bytes     UTF-8, e.g. "layers.0.w_q"
//!   rows       u64
//!   cols       u64
//!   data       rows*cols f64, row-major
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a round trip is lossless.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NOPECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    params.check(config)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(config)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, m) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes<R: Read>(r: &mut R, len: u64, what: &str) -> Result<Vec<u8>> {
    // 1 GiB is far beyond any model this crate builds
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelConfig, ModelParams)> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = read_u64(&mut r)?;
    let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut r, cfg_len, "config")?)?;
    let mut params = ModelParams::init(&config)?;
    let expected: Vec<(String, (usize, usize))> = params.tensors().into_iter().map(|(n, m)| (n, m.shape())).collect();
    let count = read_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {count}",
            expected.len()
        )));
    }
    for ((name, shape), slot) in expected.into_iter().zip(params.tensors_mut()) {
        let name_len = read_u32(&mut r)?;
        let got = String::from_utf8(read_bytes(&mut r, name_len.into(), "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        if (rows, cols) != shape {
            return Err(Error::Checkpoint(format!(
                "{name} is {rows}x{cols} in file, config implies {}x{}",
                shape.0, shape.1
            )));
        }
        for v in slot.data_mut() {
            *v = f64::from_le_bytes(read_array(&mut r)?);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((config, params))
}

/// Writes to `path` through a temporary sibling file and a rename.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, params)?;
    crate::io::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PeScheme;

    #[test]
    fn round_trip_is_bitwise() {
        for pe in [PeScheme::None, PeScheme::Sinusoidal, PeScheme::LearnedAbsolute] {
            let cfg = ModelConfig {
                d_model: 4,
                d_ff: 6,
                pe_scheme: pe,
                seed: 17,
                ..ModelConfig::default()
            };
            let mut params = ModelParams::init(&cfg).unwrap();
            params.layers[0].ffn_b1.set(0, 0, -0.0);
            params.head.set(1, 1, f64::MIN_POSITIVE / 3.0);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &cfg, &params).unwrap();
            let (cfg2, params2) = read_checkpoint(&buf[..]).unwrap();
            assert_eq!(cfg, cfg2);
            for ((_, a), (_, b)) in params.tensors().into_iter().zip(params2.tensors()) {
                let bits = |m: &crate::math::Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig {
            d_model: 2,
            d_ff: 2,
            n_layers: 1,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &params).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(&long[..]).is_err());
    }
}
