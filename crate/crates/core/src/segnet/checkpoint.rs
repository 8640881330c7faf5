//! Weight checkpoints: `weights.json` (architecture, seed, tensor list) plus
//! `weights.bin` (float32 little-endian tensors concatenated in manifest order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Model, ModelError, TensorInfo};

pub const WEIGHTS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub seed: Option<u64>,
    pub dtype: String,
    pub byte_order: String,
    pub tensors: Vec<TensorInfo>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

pub fn save_model(model: &Model, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = WeightsManifest {
        schema_version: WEIGHTS_SCHEMA_VERSION,
        architecture: model.arch.clone(),
        seed: model.init_seed,
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
        tensors: model.tensors.clone(),
    };
    let path = dir.join("weights.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(io_err(&path))?;
    let mut bytes = Vec::with_capacity(model.params.len() * 4);
    for v in &model.params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join("weights.bin");
    fs::write(&path, bytes).map_err(io_err(&path))
}

pub fn load_model(dir: &Path) -> Result<Model, ModelError> {
    let path = dir.join("weights.json");
    let corrupt = |reason: String| ModelError::CorruptCheckpoint { path: path.display().to_string(), reason };
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: WeightsManifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if manifest.schema_version != WEIGHTS_SCHEMA_VERSION {
        return Err(corrupt(format!("unsupported schema_version {}", manifest.schema_version)));
    }
    if manifest.dtype != "float32" || manifest.byte_order != "little-endian" {
        return Err(corrupt(format!("unsupported encoding {}/{}", manifest.dtype, manifest.byte_order)));
    }
    let mut model = Model::<f32>::build(manifest.architecture.clone())?;
    let same = model.tensors.len() == manifest.tensors.len()
        && model.tensors.iter().zip(&manifest.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !same {
        return Err(corrupt("tensor list does not match the architecture".into()));
    }
    let bin = dir.join("weights.bin");
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if bytes.len() != model.params.len() * 4 {
        return Err(corrupt(format!(
            "weights.bin holds {} bytes, expected {}",
            bytes.len(),
            model.params.len() * 4
        )));
    }
    for (p, b) in model.params.iter_mut().zip(bytes.chunks_exact(4)) {
        *p = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    }
    if model.params.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite weight".into()));
    }
    model.init_seed = manifest.seed;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{build_unet, init_weights, UNetConfig};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_weights(build_unet(&UNetConfig::reference(5)).unwrap(), 17);
        save_model(&m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_weights() {
        let dir = tempfile::tempdir().unwrap();
        let m = init_weights(build_unet(&UNetConfig::reference(5)).unwrap(), 17);
        save_model(&m, dir.path()).unwrap();
        let p = dir.path().join("weights.bin");
        let b = fs::read(&p).unwrap();
        fs::write(&p, &b[..b.len() - 4]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(ModelError::CorruptCheckpoint { .. })));
    }
}
