// Checkpoints: a JSON manifest at `path` and little-endian tensor buffers in
// the sibling `.bin` file. Offsets and lengths are in bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Hgct, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::ParamKind;
use crate::skeleton::SkeletonGraph;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Training metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub stat_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: DType,
    config: ModelConfig,
    graph: serde_json::Value,
    metadata: CheckpointMeta,
    blob: String,
    tensors: Vec<TensorEntry>,
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn save_checkpoint<F: Scalar>(model: &Hgct<F>, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(model.store.len());
    for e in model.store.entries() {
        let offset = blob.len();
        for &x in e.value.data() {
            x.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name: e.name.clone(),
            kind: e.kind,
            dtype: F::DTYPE,
            shape: e.value.shape().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    }
    let bin = blob_path(path);
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        dtype: F::DTYPE,
        config: model.config.clone(),
        graph: serde_json::from_str(&model.graph.to_json())?,
        metadata: CheckpointMeta {
            stat_steps: model.store.stat_steps(),
            ..meta.clone()
        },
        blob: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_manifest(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let bin = path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    Ok((manifest, blob))
}

fn decode<F: Scalar>(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor<F>> {
    let width = entry.dtype.size_bytes();
    let numel: usize = entry.shape.iter().product();
    if entry.len != numel * width {
        return Err(Error::Checkpoint(format!(
            "`{}` declares {} bytes for shape {:?}",
            entry.name, entry.len, entry.shape
        )));
    }
    let bytes = blob
        .get(entry.offset..entry.offset + entry.len)
        .ok_or_else(|| Error::Checkpoint(format!("`{}` lies outside the {}-byte blob", entry.name, blob.len())))?;
    let data = match entry.dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| F::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| F::of(f64::read_le(c))).collect(),
    };
    Tensor::new(entry.shape.clone(), data)
}

fn restore<F: Scalar>(model: &mut Hgct<F>, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    if manifest.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for entry in &manifest.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::Checkpoint(format!("tensor `{}` appears twice", entry.name)));
        }
        let id = model
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("model has no tensor `{}`", entry.name)))?;
        let want = model.store.value(id).shape().to_vec();
        if entry.shape != want {
            return Err(Error::dim(format!(
                "`{}` has shape {:?} in the checkpoint but {want:?} in the model",
                entry.name, entry.shape
            )));
        }
        *model.store.value_mut(id) = decode(entry, blob)?;
    }
    model.store.set_stat_steps(manifest.metadata.stat_steps);
    Ok(())
}

/// Rebuilds the model described by the checkpoint and restores its weights.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(Hgct<F>, CheckpointMeta)> {
    let (manifest, blob) = read_manifest(path)?;
    let graph = SkeletonGraph::from_json_str(&manifest.graph.to_string())?;
    let mut model = Hgct::new(manifest.config.clone(), graph, manifest.metadata.seed)?;
    restore(&mut model, &manifest, &blob)?;
    Ok((model, manifest.metadata))
}

/// Restores weights into an existing model; shapes must agree exactly.
pub fn load_into<F: Scalar>(model: &mut Hgct<F>, path: &Path) -> Result<CheckpointMeta> {
    let (manifest, blob) = read_manifest(path)?;
    restore(model, &manifest, &blob)?;
    Ok(manifest.metadata)
}
