//! Versioned, checksummed model archives.
//!
//! Layout: the 8-byte magic `BSEFCKPT`, a little-endian `u32` format version,
//! the SHA-256 of the payload, then the payload itself: a safetensors buffer
//! whose metadata holds a JSON [`CheckpointMeta`] under the key `bsefuse`.
//! Ensemble tensors are prefixed `a/`, `b/` and `head/`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{build_ensemble, EnsembleModel};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::layers::{ParamStore, Snapshot};
use crate::nn::{Backbone, FreezePolicy, InflationPolicy, Registry, WeightSource};

pub const MAGIC: &[u8; 8] = b"BSEFCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32;
const META_KEY: &str = "bsefuse";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberMeta {
    pub arch: String,
    pub input_channels: usize,
    pub has_head: bool,
    pub trainable_groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `backbone` or `ensemble`.
    pub kind: String,
    pub members: Vec<MemberMeta>,
    pub concat_order: Vec<String>,
    /// Class names by output index.
    pub classes: [String; 2],
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

fn member_meta(b: &Backbone) -> MemberMeta {
    MemberMeta {
        arch: b.arch().to_string(),
        input_channels: b.input_channels(),
        has_head: b.has_head(),
        trainable_groups: b
            .trainable_mask()
            .into_iter()
            .filter(|(_, t)| *t)
            .map(|(g, _)| g)
            .collect(),
    }
}

fn collect(store: &ParamStore, prefix: &str, out: &mut Vec<(String, Tensor)>) {
    for (_, p) in store.iter_params() {
        out.push((format!("{prefix}{}", p.name), p.var.as_tensor().clone()));
    }
}

pub fn save_backbone(b: &Backbone, path: &Path, extra: BTreeMap<String, String>) -> Result<()> {
    let mut tensors = Vec::new();
    collect(b.store(), "", &mut tensors);
    let meta = CheckpointMeta {
        kind: "backbone".into(),
        members: vec![member_meta(b)],
        concat_order: Vec::new(),
        classes: ["benign".into(), "malignant".into()],
        extra,
    };
    write_archive(tensors, &meta, path)
}

pub fn save_ensemble(e: &EnsembleModel, path: &Path, extra: BTreeMap<String, String>) -> Result<()> {
    let mut tensors = Vec::new();
    collect(e.extractor_a().store(), "a/", &mut tensors);
    collect(e.extractor_b().store(), "b/", &mut tensors);
    collect(e.head_store(), "head/", &mut tensors);
    let meta = CheckpointMeta {
        kind: "ensemble".into(),
        members: vec![member_meta(e.extractor_a()), member_meta(e.extractor_b())],
        concat_order: vec!["a".into(), "b".into()],
        classes: ["benign".into(), "malignant".into()],
        extra,
    };
    write_archive(tensors, &meta, path)
}

pub fn checkpoint_save(model: &Model, path: &Path, extra: BTreeMap<String, String>) -> Result<()> {
    match model {
        Model::Single(b) => save_backbone(b, path, extra),
        Model::Ensemble(e) => save_ensemble(e, path, extra),
    }
}

fn write_archive(tensors: Vec<(String, Tensor)>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let payload = safetensors::serialize(tensors, Some(info))
        .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&Sha256::digest(&payload));
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Verify the header and checksum, returning the payload.
fn read_payload(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointCorrupt(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    if Sha256::digest(payload).as_slice() != &bytes[12..44] {
        return Err(Error::CheckpointCorrupt(format!("{}: checksum mismatch", path.display())));
    }
    Ok(payload.to_vec())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let payload = read_payload(path)?;
    parse_meta(&payload)
}

fn parse_meta(payload: &[u8]) -> Result<CheckpointMeta> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(payload)
        .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::CheckpointCorrupt("missing metadata".into()))?;
    Ok(serde_json::from_str(json)?)
}

fn rebuild(meta: &MemberMeta, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<Backbone> {
    let mut b = Registry::default().build(&meta.arch, &WeightSource::Seeded(0))?;
    b.inflate_input_channels(meta.input_channels, InflationPolicy::ZeroInit)?;
    if !meta.has_head {
        b = b.strip_classifier()?;
    }
    restore_store(b.store(), tensors, prefix)?;
    b.apply_freeze_policy(&FreezePolicy::Custom(meta.trainable_groups.clone()))?;
    Ok(b)
}

fn restore_store(store: &ParamStore, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
    let mut snap = Vec::new();
    for (_, p) in store.iter_params() {
        let key = format!("{prefix}{}", p.name);
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::CheckpointMismatch(format!("checkpoint lacks {key}")))?;
        snap.push((p.name.clone(), t.clone()));
    }
    store.restore(&Snapshot(snap))
}

pub fn checkpoint_load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let payload = read_payload(path)?;
    let meta = parse_meta(&payload)?;
    let tensors = candle_core::safetensors::load_buffer(&payload, &Device::Cpu)?;
    let model = match (meta.kind.as_str(), meta.members.as_slice()) {
        ("backbone", [m]) => Model::Single(rebuild(m, &tensors, "")?),
        ("ensemble", [ma, mb]) => {
            let a = rebuild(ma, &tensors, "a/")?;
            let b = rebuild(mb, &tensors, "b/")?;
            let e = build_ensemble(a, b, 0)?;
            restore_store(e.head_store(), &tensors, "head/")?;
            Model::Ensemble(e)
        }
        (kind, members) => {
            return Err(Error::CheckpointCorrupt(format!(
                "unsupported layout {kind:?} with {} member(s)",
                members.len()
            )))
        }
    };
    Ok((model, meta))
}

pub fn load_single(path: &Path) -> Result<Backbone> {
    match checkpoint_load(path)?.0 {
        Model::Single(b) => Ok(b),
        Model::Ensemble(_) => Err(Error::CheckpointMismatch("expected a single backbone".into())),
    }
}

pub fn load_ensemble(path: &Path) -> Result<EnsembleModel> {
    match checkpoint_load(path)?.0 {
        Model::Ensemble(e) => Ok(e),
        Model::Single(_) => Err(Error::CheckpointMismatch("expected an ensemble".into())),
    }
}
