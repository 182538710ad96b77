//! Dataset serialization: a JSON manifest plus one binary file per episode.
//!
//! Episode files carry a fixed little-endian header (magic, version, dims)
//! followed by dtype-tagged payloads: frames as raw 8-bit, joints as 32-bit
//! floats. The manifest records the generator seed, a hash of the scene
//! config and a SHA-256 digest per episode file; loading re-hashes every
//! file and refuses corrupt or mismatched data.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_episode, EnvConfig, Episode, D_JOINT};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"AEP1";
const VERSION: u32 = 1;
const DTYPE_U8: u8 = 1;
const DTYPE_F32: u8 = 2;

/// One episode reference in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    /// File name relative to the dataset directory.
    pub file: String,
    /// Box slot of the episode.
    pub slot: usize,
    /// Jitter seed.
    pub seed: u64,
    /// Box center before the lift, pixels.
    pub box_center_px: [f64; 2],
    /// Steps in the episode.
    pub steps: usize,
    /// SHA-256 of the episode file, hex.
    pub sha256: String,
}

/// Dataset index: what was generated, from what, and how to check it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    /// Master seed the episode seeds derive from.
    pub seed: u64,
    /// Hash of the scene config used at generation time.
    pub config_hash: String,
    /// The scene config itself.
    pub env: EnvConfig,
    /// Per-episode references.
    pub episodes: Vec<ManifestEntry>,
    /// Episodes per slot.
    pub slot_counts: Vec<usize>,
}

/// Hex SHA-256 of the canonical JSON serialization of the scene config.
pub fn config_hash(cfg: &EnvConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex(&Sha256::digest(&json))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn episode_bytes(ep: &Episode) -> Vec<u8> {
    let (t, c, h, w) = ep.frames.dim();
    let mut buf = Vec::with_capacity(t * c * h * w + t * D_JOINT * 4 + 64);
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    for dim in [t, c, h, w, D_JOINT, ep.box_slot] {
        buf.write_u32::<LittleEndian>(dim as u32).unwrap();
    }
    buf.write_u64::<LittleEndian>(ep.seed).unwrap();
    buf.write_f64::<LittleEndian>(ep.box_center_px[0]).unwrap();
    buf.write_f64::<LittleEndian>(ep.box_center_px[1]).unwrap();
    buf.push(DTYPE_U8);
    buf.extend(ep.frames.iter().copied());
    buf.push(DTYPE_F32);
    for &j in ep.joints.iter() {
        buf.write_f32::<LittleEndian>(j).unwrap();
    }
    buf
}

/// Write one episode file.
pub fn save_episode(path: &Path, ep: &Episode) -> Result<()> {
    let bytes = episode_bytes(ep);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read one episode file (no integrity check at this level; the dataset
/// loader checks hashes against the manifest).
pub fn load_episode(path: &Path) -> Result<Episode> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Dataset(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let [t, c, h, w, d_j, box_slot] = dims;
    if c != 3 || d_j != D_JOINT {
        return Err(Error::Dataset(format!(
            "{}: unexpected layout c={c} d_j={d_j}",
            path.display()
        )));
    }
    let seed = r.read_u64::<LittleEndian>()?;
    let box_center_px = [
        r.read_f64::<LittleEndian>()?,
        r.read_f64::<LittleEndian>()?,
    ];
    if r.read_u8()? != DTYPE_U8 {
        return Err(Error::Dataset(format!("{}: expected u8 frames", path.display())));
    }
    let mut frame_bytes = vec![0u8; t * c * h * w];
    r.read_exact(&mut frame_bytes)?;
    let frames = Array4::from_shape_vec((t, c, h, w), frame_bytes)
        .map_err(|e| Error::Dataset(format!("{}: frame shape: {e}", path.display())))?;
    if r.read_u8()? != DTYPE_F32 {
        return Err(Error::Dataset(format!("{}: expected f32 joints", path.display())));
    }
    let mut joint_vals = vec![0f32; t * d_j];
    for v in joint_vals.iter_mut() {
        *v = r.read_f32::<LittleEndian>()?;
    }
    if !r.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: {} trailing bytes",
            path.display(),
            r.len()
        )));
    }
    let joints = Array2::from_shape_vec((t, d_j), joint_vals)
        .map_err(|e| Error::Dataset(format!("{}: joint shape: {e}", path.display())))?;
    Ok(Episode {
        frames,
        joints,
        box_slot,
        box_center_px,
        seed,
    })
}

/// Generate `per_slot` episodes for each slot and write the dataset to
/// `dir`. Episode seeds are `seed + index`; generation is parallel across
/// episodes but the manifest order is fixed.
pub fn generate_dataset(
    cfg: &EnvConfig,
    per_slot: usize,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let specs: Vec<(usize, u64, PathBuf)> = (0..cfg.slots.len())
        .flat_map(|slot| {
            (0..per_slot).map(move |k| {
                let idx = slot * per_slot + k;
                (slot, seed.wrapping_add(idx as u64), format!("ep_{idx:03}_slot{slot}.bin"))
            })
        })
        .map(|(slot, s, name)| (slot, s, dir.join(name)))
        .collect();

    let episodes: Vec<(usize, u64, PathBuf, Episode)> = specs
        .into_par_iter()
        .map(|(slot, ep_seed, path)| {
            let ep = generate_episode(cfg, slot, ep_seed)?;
            Ok((slot, ep_seed, path, ep))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::with_capacity(episodes.len());
    let mut slot_counts = vec![0usize; cfg.slots.len()];
    for (slot, ep_seed, path, ep) in &episodes {
        save_episode(path, ep)?;
        let digest = hex(&Sha256::digest(fs::read(path)?));
        slot_counts[*slot] += 1;
        entries.push(ManifestEntry {
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            slot: *slot,
            seed: *ep_seed,
            box_center_px: ep.box_center_px,
            steps: ep.frames.dim().0,
            sha256: digest,
        });
    }
    let manifest = DatasetManifest {
        seed,
        config_hash: config_hash(cfg),
        env: cfg.clone(),
        episodes: entries,
        slot_counts,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Load a dataset directory, verifying every episode hash and the config
/// hash recorded in the manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Episode>)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if config_hash(&manifest.env) != manifest.config_hash {
        return Err(Error::Dataset(format!(
            "{}: config hash mismatch — manifest was edited or generated by different code",
            manifest_path.display()
        )));
    }
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in &manifest.episodes {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        let digest = hex(&Sha256::digest(&bytes));
        if digest != entry.sha256 {
            return Err(Error::Dataset(format!(
                "{}: SHA-256 mismatch (expected {}, got {digest})",
                path.display(),
                entry.sha256
            )));
        }
        episodes.push(load_episode(&path)?);
    }
    Ok((manifest, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_cfg() -> EnvConfig {
        EnvConfig {
            steps: 24,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn episode_file_round_trips_exactly() {
        let cfg = small_cfg();
        let ep = generate_episode(&cfg, 2, 17).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ep.bin");
        save_episode(&path, &ep).unwrap();
        let back = load_episode(&path).unwrap();
        assert_eq!(ep, back);
    }

    #[test]
    fn default_protocol_yields_fifteen_episodes() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let manifest = generate_dataset(&cfg, 5, 42, dir.path()).unwrap();
        assert_eq!(manifest.episodes.len(), 15);
        assert_eq!(manifest.slot_counts, vec![5, 5, 5]);
        let (m2, eps) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(eps.len(), 15);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let m1 = generate_dataset(&cfg, 2, 7, d1.path()).unwrap();
        let m2 = generate_dataset(&cfg, 2, 7, d2.path()).unwrap();
        assert_eq!(m1.episodes, m2.episodes);
        let e1 = load_dataset(d1.path()).unwrap().1;
        let e2 = load_dataset(d2.path()).unwrap().1;
        assert_eq!(e1, e2);
    }

    #[test]
    fn flipped_byte_is_detected_on_load() {
        let cfg = small_cfg();
        let dir = tempdir().unwrap();
        let manifest = generate_dataset(&cfg, 1, 3, dir.path()).unwrap();
        let victim = dir.path().join(&manifest.episodes[1].file);
        let mut bytes = fs::read(&victim).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&victim, bytes).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Dataset(msg)) => assert!(msg.contains("SHA-256"), "{msg}"),
            other => panic!("corruption not detected: {other:?}"),
        }
    }

    #[test]
    fn config_hash_tracks_config_changes() {
        let a = config_hash(&EnvConfig::default());
        let mut cfg = EnvConfig::default();
        cfg.lift_px = 7.0;
        assert_ne!(a, config_hash(&cfg));
        assert_eq!(a, config_hash(&EnvConfig::default()));
    }
}
