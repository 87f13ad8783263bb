//! Checkpoint formats. Both formats are little-endian and fully specified
//! here so external tools can read them byte-exactly.
//!
//! **Trigger checkpoint** (`*.trig`): the raw perturbation values as
//! little-endian `f32`, C-order over `(channel, row, col)`, nothing else.
//! A JSON sidecar at `<file>.json` carries `{shape, epsilon, role,
//! encoder_hash, seed, loss_history}`.
//!
//! **Toy encoder checkpoint** (`*.enc`): one JSON header line
//! (`{"arch", "param_count", "mode"}`), a newline, then the flat parameter
//! vector as little-endian `f64`. A JSON sidecar at `<file>.meta.json`
//! carries `{name, dim, resolution, hash}`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::encoder::conv::{FeatureMode, ToyEncoder, FEATURE_DIM, INPUT_RES, PARAM_COUNT};
use crate::encoder::TOY_ARCH;
use crate::error::{Error, Result};
use crate::trigger::{EpochStat, Perturbation, PerturbationRole};

/// Sidecar metadata stored next to a trigger checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerMeta {
    pub shape: [usize; 3],
    pub epsilon: f64,
    pub role: PerturbationRole,
    /// Parameter hash of the encoder the trigger was optimized against.
    pub encoder_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub loss_history: Vec<EpochStat>,
}

/// SHA-256 hex digest of a perturbation's serialized form — the same f32
/// little-endian bytes [`save_trigger`] writes, so the hash of an in-memory
/// trigger equals the hash of its checkpoint file body.
pub fn trigger_hash(p: &Perturbation) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for &v in p.values().iter() {
        hasher.update((v as f32).to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Write a trigger checkpoint and its sidecar.
pub fn save_trigger(path: &Path, p: &Perturbation, meta: &TriggerMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(p.values().len() * 4);
    for &v in p.values().iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("write failed: {e}"),
    })?;
    let sidecar = sidecar_path(path, ".json");
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&sidecar, json).map_err(|e| Error::Checkpoint {
        path: sidecar.clone(),
        message: format!("sidecar write failed: {e}"),
    })?;
    Ok(())
}

/// Load a trigger checkpoint; the sidecar must be present and consistent.
pub fn load_trigger(path: &Path) -> Result<(Perturbation, TriggerMeta)> {
    let sidecar = sidecar_path(path, ".json");
    let meta_text = fs::read_to_string(&sidecar).map_err(|e| Error::Checkpoint {
        path: sidecar.clone(),
        message: format!("sidecar read failed: {e}"),
    })?;
    let meta: TriggerMeta = serde_json::from_str(&meta_text)?;
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("read failed: {e}"),
    })?;
    let [c, h, w] = meta.shape;
    let expect = c * h * w * 4;
    if bytes.len() != expect {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "trigger file is {} bytes, sidecar shape {:?} implies {expect}",
                bytes.len(),
                meta.shape
            ),
        });
    }
    let mut values = Array3::zeros((c, h, w));
    for (i, v) in values.iter_mut().enumerate() {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[i * 4..i * 4 + 4]);
        *v = f32::from_le_bytes(buf) as f64;
    }
    let p = Perturbation::new(values, meta.epsilon, meta.role)?;
    Ok((p, meta))
}

#[derive(Debug, Serialize, Deserialize)]
struct EncoderHeader {
    arch: String,
    param_count: usize,
    mode: FeatureMode,
}

/// Sidecar metadata stored next to an encoder checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub name: String,
    pub dim: usize,
    pub resolution: usize,
    /// SHA-256 hex digest of the parameter vector.
    pub hash: String,
}

/// Write a toy-encoder checkpoint and its `.meta.json` sidecar.
pub fn save_toy_encoder(path: &Path, enc: &ToyEncoder, name: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let header = EncoderHeader {
        arch: TOY_ARCH.to_string(),
        param_count: PARAM_COUNT,
        mode: enc.mode(),
    };
    let mut out = Vec::with_capacity(PARAM_COUNT * 8 + 128);
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for &v in enc.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("create failed: {e}"),
    })?;
    f.write_all(&out).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("write failed: {e}"),
    })?;
    let meta = EncoderMeta {
        name: name.to_string(),
        dim: FEATURE_DIM,
        resolution: INPUT_RES,
        hash: enc.param_hash(),
    };
    let sidecar = sidecar_path(path, ".meta.json");
    fs::write(&sidecar, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::Checkpoint {
        path: sidecar.clone(),
        message: format!("sidecar write failed: {e}"),
    })?;
    Ok(())
}

/// Load a toy-encoder checkpoint. If the `.meta.json` sidecar exists, the
/// parameter hash is verified against it.
pub fn load_toy_encoder(path: &Path) -> Result<ToyEncoder> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("read failed: {e}"),
    })?;
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        message: "missing header line".into(),
    })?;
    let header: EncoderHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.arch != TOY_ARCH {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("unknown arch {:?}", header.arch),
        });
    }
    if header.param_count != PARAM_COUNT {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("expected {PARAM_COUNT} params, header says {}", header.param_count),
        });
    }
    let body = &bytes[newline + 1..];
    if body.len() != PARAM_COUNT * 8 {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("body is {} bytes, expected {}", body.len(), PARAM_COUNT * 8),
        });
    }
    let mut params = vec![0.0f64; PARAM_COUNT];
    for (i, v) in params.iter_mut().enumerate() {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&body[i * 8..i * 8 + 8]);
        *v = f64::from_le_bytes(buf);
    }
    let mut enc = ToyEncoder::init(0, header.mode);
    enc.set_params(&params)?;
    let sidecar = sidecar_path(path, ".meta.json");
    if sidecar.exists() {
        let meta: EncoderMeta = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
        let actual = enc.param_hash();
        if meta.hash != actual {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("hash mismatch: sidecar {} vs parameters {actual}", meta.hash),
            });
        }
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trigger::init_perturbation;

    #[test]
    fn trigger_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trig");
        let p = init_perturbation((3, 4, 4), 8.0 / 255.0, 11, PerturbationRole::Trigger).unwrap();
        let meta = TriggerMeta {
            shape: [3, 4, 4],
            epsilon: p.epsilon(),
            role: p.role(),
            encoder_hash: "none".into(),
            seed: 11,
            loss_history: vec![],
        };
        save_trigger(&path, &p, &meta).unwrap();
        let (q, meta2) = load_trigger(&path).unwrap();
        assert_eq!(meta2.seed, 11);
        for (a, b) in p.values().iter().zip(q.values().iter()) {
            assert_eq!(*a as f32, *b as f32);
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn trigger_save_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_perturbation((3, 4, 4), 0.05, 3, PerturbationRole::Trigger).unwrap();
        let meta = TriggerMeta {
            shape: [3, 4, 4],
            epsilon: 0.05,
            role: PerturbationRole::Trigger,
            encoder_hash: "none".into(),
            seed: 3,
            loss_history: vec![],
        };
        let p1 = dir.path().join("a.trig");
        let p2 = dir.path().join("b.trig");
        save_trigger(&p1, &p, &meta).unwrap();
        save_trigger(&p2, &p, &meta).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn encoder_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.enc");
        let enc = ToyEncoder::init(7, FeatureMode::Pooled);
        save_toy_encoder(&path, &enc, "fixture").unwrap();
        let loaded = load_toy_encoder(&path).unwrap();
        assert_eq!(enc.params(), loaded.params());
        assert_eq!(enc.param_hash(), loaded.param_hash());
    }

    #[test]
    fn encoder_hash_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.enc");
        let enc = ToyEncoder::init(7, FeatureMode::Pooled);
        save_toy_encoder(&path, &enc, "fixture").unwrap();
        // Corrupt one parameter byte in the body.
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(load_toy_encoder(&path).is_err());
    }
}
