//! Checkpoint serialization: every parameter tensor, bit-exact.
//!
//! A checkpoint is a single little-endian binary file: magic, format
//! version, scalar dtype tag, the config hash of the model that produced
//! it, the epoch, then each parameter as `(name, shape, raw data)` in
//! registration order. Loading verifies magic, version, dtype, config hash
//! and the exact name/shape sequence of the receiving [`ParamSet`], so a
//! checkpoint can never be silently applied to a different architecture.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::tensor::{ParamSet, Scalar};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ACKP";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Write `params` to `path`. `config_hash` ties the file to the model
/// config that built the parameter set; `epoch` records training progress.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    config_hash: &str,
    epoch: usize,
    params: &ParamSet<F>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_u32::<LittleEndian>(VERSION)?;
    buf.write_u8(F::DTYPE.tag())?;
    write_str(&mut buf, config_hash)?;
    buf.write_u64::<LittleEndian>(epoch as u64)?;
    buf.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, value) in params.iter() {
        write_str(&mut buf, name)?;
        buf.write_u32::<LittleEndian>(value.ndim() as u32)?;
        for &d in value.shape() {
            buf.write_u32::<LittleEndian>(d as u32)?;
        }
        // Row-major scalar stream; `iter` follows logical order regardless
        // of the underlying memory layout.
        for &v in value.iter() {
            buf.write_f64::<LittleEndian>(v.as_f64())?;
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Metadata read back from a checkpoint file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Config hash recorded at save time.
    pub config_hash: String,
    /// Epoch recorded at save time.
    pub epoch: usize,
}

/// Load a checkpoint into an existing parameter set. The set must have been
/// built from the same config: names, shapes and order must all match, and
/// `expect_hash` (when given) must equal the recorded config hash.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
    expect_hash: Option<&str>,
    params: &mut ParamSet<F>,
) -> Result<CheckpointMeta> {
    let bytes = fs::read(path)?;
    let mut r = &bytes[..];

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let dtype = r.read_u8()?;
    if dtype != F::DTYPE.tag() {
        return Err(bad(format!(
            "dtype tag {dtype} does not match the requested scalar type (tag {})",
            F::DTYPE.tag()
        )));
    }
    let config_hash = read_str(&mut r)?;
    if let Some(expect) = expect_hash {
        if expect != config_hash {
            return Err(bad(format!(
                "config hash mismatch: checkpoint was saved from {config_hash}, \
                 the current config hashes to {expect}"
            )));
        }
    }
    let epoch = r.read_u64::<LittleEndian>()? as usize;
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != params.len() {
        return Err(bad(format!(
            "parameter count mismatch: file has {count}, model has {}",
            params.len()
        )));
    }
    for id in params.ids().collect::<Vec<_>>() {
        let name = read_str(&mut r)?;
        if name != params.name(id) {
            return Err(bad(format!(
                "parameter order mismatch: expected {}, found {name}",
                params.name(id)
            )));
        }
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        if shape != params.value(id).shape() {
            return Err(bad(format!(
                "shape mismatch for {name}: file {shape:?}, model {:?}",
                params.value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(F::cast(r.read_f64::<LittleEndian>()?));
        }
        *params.value_mut(id) = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .expect("shape/product already verified");
    }
    if !r.is_empty() {
        return Err(bad(format!("{} trailing bytes after parameters", r.len())));
    }
    Ok(CheckpointMeta { config_hash, epoch })
}

fn write_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    buf.write_u32::<LittleEndian>(s.len() as u32)?;
    buf.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > r.len() {
        return Err(bad("string length exceeds remaining bytes"));
    }
    let (head, tail) = r.split_at(len);
    let s = String::from_utf8(head.to_vec()).map_err(|_| bad("invalid utf-8 in header"))?;
    *r = tail;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::build_model;
    use tempfile::tempdir;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_td: 2,
            n_bu: 3,
            d_td: 8,
            grid: 4,
            image: 16,
            modality_width: 8,
            shared_width: 6,
            proj_width: 4,
            td_mlp_hidden: 8,
            enc_mid: 4,
            per_mid: 3,
            per_narrow: 2,
            fov_mid: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let (_, ps) = build_model::<f32>(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &cfg.hash(), 42, &ps).unwrap();

        // Load into a differently-seeded set of the same architecture.
        let (_, mut other) = build_model::<f32>(&ModelConfig { seed: 99, ..cfg.clone() }).unwrap();
        let meta = load_checkpoint(&path, Some(&cfg.hash()), &mut other).unwrap();
        assert_eq!(meta.epoch, 42);
        assert_eq!(meta.config_hash, cfg.hash());
        for (a, b) in ps.iter().zip(other.iter()) {
            assert_eq!(a.0, b.0);
            // Bit equality, not approximate equality.
            for (x, y) in a.1.iter().zip(b.1.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn config_hash_mismatch_is_rejected() {
        let cfg = small_cfg();
        let (_, ps) = build_model::<f32>(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &cfg.hash(), 1, &ps).unwrap();

        let other_cfg = ModelConfig { tau_td: 0.7, ..cfg };
        let (_, mut ps2) = build_model::<f32>(&other_cfg).unwrap();
        let err = load_checkpoint(&path, Some(&other_cfg.hash()), &mut ps2).unwrap_err();
        assert!(err.to_string().contains("config hash"), "{err}");
    }

    #[test]
    fn architecture_mismatch_is_rejected_even_without_hash() {
        let cfg = small_cfg();
        let (_, ps) = build_model::<f32>(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, "x", 1, &ps).unwrap();

        let wider = ModelConfig { modality_width: 16, ..cfg };
        let (_, mut ps2) = build_model::<f32>(&wider).unwrap();
        let err = load_checkpoint(&path, None, &mut ps2).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let cfg = small_cfg();
        let (_, ps) = build_model::<f32>(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, "x", 1, &ps).unwrap();

        let (_, mut ps64) = build_model::<f64>(&cfg).unwrap();
        let err = load_checkpoint(&path, None, &mut ps64).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let cfg = small_cfg();
        let (_, ps) = build_model::<f32>(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, "x", 1, &ps).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();

        let (_, mut ps2) = build_model::<f32>(&cfg).unwrap();
        assert!(load_checkpoint(&path, None, &mut ps2).is_err());
    }
}
