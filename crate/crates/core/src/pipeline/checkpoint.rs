//! Checkpoint files.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, JSON manifest,
//! then every parameter as little-endian `f32` in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AblationProfile, BackboneConfig, Tracker};
use crate::params::{ModelParams, ModuleTag};
use crate::pipeline::train::TrainConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NPCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tag: ModuleTag,
    pub frozen: bool,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: BackboneConfig,
    pub profile: AblationProfile,
    pub params: Vec<ParamEntry>,
    pub train_config: Option<TrainConfig>,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub payload_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tracker: Tracker,
    pub train_config: Option<TrainConfig>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(tracker: Tracker) -> Self {
        Self {
            tracker,
            train_config: None,
            metadata: BTreeMap::new(),
        }
    }
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Serializes to bytes. Parameter values are rounded to `f32`.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(ckpt.tracker.params.len());
    let mut payload = Vec::with_capacity(ckpt.tracker.params.total_numel() * 4);
    for p in ckpt.tracker.params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            tag: p.tag,
            frozen: p.frozen,
            shape: p.value.shape().to_vec(),
            offset: payload.len(),
        });
        for v in p.value.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        model: ckpt.tracker.config.clone(),
        profile: ckpt.tracker.profile,
        params: entries,
        train_config: ckpt.train_config.clone(),
        metadata: ckpt.metadata.clone(),
        payload_bytes: payload.len(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a checkpoint file into its manifest and payload, validating sizes.
pub fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointManifest, &'a [u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(ckpt_err(path, "truncated manifest"));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&body[..len]).map_err(|e| ckpt_err(path, format!("manifest: {e}")))?;
    let payload = &body[len..];
    if payload.len() != manifest.payload_bytes {
        return Err(ckpt_err(
            path,
            format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            ),
        ));
    }
    let mut expected = 0;
    for e in &manifest.params {
        if e.offset != expected {
            return Err(ckpt_err(path, format!("parameter `{}` at unexpected offset", e.name)));
        }
        expected += e.shape.iter().product::<usize>() * 4;
    }
    if expected != payload.len() {
        return Err(ckpt_err(path, "parameter shapes do not cover the payload"));
    }
    Ok((manifest, payload))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let (manifest, payload) = split(bytes, path)?;
    let mut params = ModelParams::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let data = payload[e.offset..e.offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Tensor::new(e.shape.clone(), data).map_err(|err| ckpt_err(path, err))?;
        let idx = params
            .insert(e.name.clone(), e.tag, value)
            .map_err(|err| ckpt_err(path, err))?;
        params.by_index_mut(idx).frozen = e.frozen;
    }
    Ok(Checkpoint {
        tracker: Tracker {
            config: manifest.model,
            profile: manifest.profile,
            params,
        },
        train_config: manifest.train_config,
        metadata: manifest.metadata,
    })
}

/// Writes through a temporary file and renames, so readers never observe a
/// partial checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Raw stored bytes of every backbone and head parameter, by name.
pub fn foundation_bytes(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, payload) = split(&bytes, path)?;
    Ok(manifest
        .params
        .iter()
        .filter(|e| e.tag.is_foundation())
        .map(|e| {
            let n = e.shape.iter().product::<usize>() * 4;
            (e.name.clone(), payload[e.offset..e.offset + n].to_vec())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AblationProfile;

    fn tracker() -> Tracker {
        let mut t = Tracker::foundation(BackboneConfig::tiny(), 1)
            .unwrap()
            .with_prompts(AblationProfile::FULL, 2)
            .unwrap();
        t.params.set_frozen_where(|p| p.tag.is_foundation());
        t
    }

    #[test]
    fn round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ckpt = Checkpoint::new(tracker());
        ckpt.train_config = Some(TrainConfig::prompt_default(AblationProfile::FULL));
        ckpt.metadata.insert("note".into(), serde_json::json!("x"));
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.train_config, ckpt.train_config);
        assert_eq!(back.metadata, ckpt.metadata);
        assert_eq!(back.tracker.config, ckpt.tracker.config);
        for (a, b) in back.tracker.params.iter().zip(ckpt.tracker.params.iter()) {
            assert_eq!((&a.name, a.tag, a.frozen), (&b.name, b.tag, b.frozen));
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // a second save of the loaded model is byte-identical
        let again = dir.path().join("n.ckpt");
        save_checkpoint(&back, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Checkpoint::new(tracker()), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 400, 20, 4] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn foundation_bytes_cover_backbone_and_head_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let t = tracker();
        save_checkpoint(&Checkpoint::new(t.clone()), &path).unwrap();
        let fb = foundation_bytes(&path).unwrap();
        let want = t.params.iter().filter(|p| p.tag.is_foundation()).count();
        assert_eq!(fb.len(), want);
        assert!(fb.keys().all(|k| !k.starts_with("dcp.") && !k.starts_with("gfa.")));
    }
}
