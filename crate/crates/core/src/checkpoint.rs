//! Single-file checkpoints: little-endian f32 arrays in the safetensors
//! container with a JSON manifest stored under the `manifest` header key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Stage1,
    Stage2,
    LanguageModel,
    Report,
    Vqa,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::LanguageModel => "language-model",
            Stage::Report => "report",
            Stage::Vqa => "vqa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub stage: Stage,
    pub epoch: usize,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl CheckpointManifest {
    pub fn new(stage: Stage, epoch: usize, config_hash: &str, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            stage,
            epoch,
            config_hash: config_hash.to_string(),
            seed,
            metrics: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Fails with a state error unless the checkpoint came from one of
    /// `allowed`.
    pub fn require_stage(&self, allowed: &[Stage], consumer: &str) -> Result<()> {
        if allowed.contains(&self.manifest.stage) {
            return Ok(());
        }
        let names: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
        Err(Error::State(format!(
            "{consumer} requires a {} checkpoint, got {}",
            names.join(" or "),
            self.manifest.stage.name()
        )))
    }
}

/// Writes every tensor as f32. The file is written to a sibling temporary
/// path and renamed into place.
pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>, manifest: &CheckpointManifest) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let flat: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.as_str(), v))
                .map_err(|e| Error::Shape(format!("tensor {n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let header = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(manifest)?)]);
    let bytes = safetensors::tensor::serialize(views, Some(header))
        .map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(path, &bytes)
}

fn parse_manifest(path: &Path, bytes: &[u8]) -> Result<CheckpointManifest> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(path, e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| corrupt(path, "missing manifest"))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(text).map_err(|e| corrupt(path, format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads every array, failing before returning anything if the file is
/// damaged. With `expected_hash` set, a different config hash is a
/// compatibility error unless `allow_mismatch` is true.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>, allow_mismatch: bool) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(path, &bytes)?;
    if let Some(h) = expected_hash {
        if h != manifest.config_hash {
            if allow_mismatch {
                log::warn!("{}: config hash {} differs from {h}; loading anyway", path.display(), manifest.config_hash);
            } else {
                return Err(Error::Compatibility(format!(
                    "{} was written with config {}, current config is {h}",
                    path.display(),
                    manifest.config_hash
                )));
            }
        }
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(path, e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(corrupt(path, format!("tensor {name} has dtype {:?}", view.dtype())));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(values, view.shape(), &Device::Cpu)?);
    }
    Ok(Checkpoint { manifest, tensors })
}
