//! Checkpoint directories: `manifest.json` plus `params.bin`, a flat buffer
//! of little-endian `f64` values for every parameter in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::config::ModelConfig;
use crate::encoders::params::{ParamStore, Role};
use crate::error::{Result, TplError};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "tpl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BUFFER_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    /// Offset into the buffer, in values (multiply by 8 for bytes).
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// `backbone` or `tuned`.
    pub kind: String,
    pub model: ModelConfig,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub metadata: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub buffer: String,
    pub buffer_bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
}

pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    model: &ModelConfig,
    params: &ParamStore,
    metadata: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes = params.to_le_bytes();
    let mut offset = 0;
    let entries = params
        .iter()
        .map(|p| {
            let e = ParamEntry {
                name: p.name.clone(),
                role: p.role,
                shape: p.tensor.shape().to_vec(),
                offset,
                len: p.tensor.len(),
            };
            offset += p.tensor.len();
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        model: model.clone(),
        vision_layers: model.vision_layers,
        text_layers: model.text_layers,
        metadata,
        params: entries,
        buffer: BUFFER_FILE.into(),
        buffer_bytes: bytes.len(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    fs::write(dir.join(BUFFER_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(TplError::format(
            "checkpoint",
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let bytes = fs::read(dir.join(&manifest.buffer))?;
    if bytes.len() != manifest.buffer_bytes {
        return Err(TplError::Truncated {
            what: "checkpoint buffer".into(),
            expected: manifest.buffer_bytes,
            actual: bytes.len(),
        });
    }
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(TplError::format("checkpoint", "buffer hash mismatch"));
    }
    let mut params = ParamStore::new();
    for e in &manifest.params {
        let end = (e.offset + e.len) * 8;
        if end > bytes.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(TplError::format("checkpoint", format!("bad extent for {}", e.name)));
        }
        let values = bytes[e.offset * 8..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(e.name.clone(), e.role, Tensor::new(e.shape.clone(), values)?)?;
    }
    Ok(Checkpoint { manifest, params })
}
