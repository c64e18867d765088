//! Safetensors checkpoints: parameters and optimizer moments as tensors,
//! everything else as one JSON metadata entry.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::TeacherSpec;
use crate::error::{Error, IoContext, Result};
use crate::l2w::L2WVariant;
use crate::student::StudentSpec;
use crate::train::{EpochLoss, SplitInfo, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "d24fad";

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("student_ep{epoch}.ckpt")
}

/// Non-tensor contents of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub epoch: usize,
    pub optimizer_steps: u64,
    pub teacher: TeacherSpec,
    pub teacher_checksum: String,
    pub student: StudentSpec,
    pub l2w_variant: L2WVariant,
    pub train: TrainConfig,
    pub split: SplitInfo,
    pub loss_trace: Vec<EpochLoss>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

/// Writes via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).at(dir)?;
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save(path: &Path, meta: &CheckpointMeta, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut tensors = tensors;
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let meta_json = serde_json::to_string(meta).expect("checkpoint metadata serializes");
    let info = HashMap::from([(META_KEY.to_string(), meta_json)]);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info))
        .map_err(|e| Error::State(format!("serializing checkpoint: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = fs::read(path).at(path)?;
    let incompatible = |reason: String| Error::Incompatible {
        path: path.to_path_buf(),
        reason,
    };
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| incompatible(format!("unreadable header: {e}")))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| incompatible("no d24fad metadata".into()))?;
    let version: serde_json::Value =
        serde_json::from_str(meta_json).map_err(|e| incompatible(format!("bad metadata: {e}")))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        other => {
            return Err(incompatible(format!(
                "format version {other:?}, this build reads {FORMAT_VERSION}"
            )))
        }
    }
    let meta: CheckpointMeta =
        serde_json::from_value(version).map_err(|e| incompatible(format!("bad metadata: {e}")))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)
        .map_err(|e| incompatible(format!("bad tensor data: {e}")))?;
    Ok(Checkpoint { meta, tensors })
}
