//! Checkpoints: one safetensors archive of f32 parameters whose header
//! metadata carries the architecture config and a format version.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use toonbetween_core::nn::{ParamStore, Tensor};

use crate::config::ModelConfig;
use crate::occlusion_blend::BLEND_INPUTS;
use crate::pipeline::{Inbetweener, Model};

pub const FORMAT_VERSION: &str = "toonbetween-1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint archive: {0}")]
    Archive(#[from] safetensors::SafeTensorError),
    #[error("checkpoint config: {0}")]
    Config(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Serializes a model to bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>, CheckpointError> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params
        .iter()
        .map(|(name, t)| (name.clone(), t.shape.clone(), t.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = raw
        .iter()
        .map(|(name, shape, bytes)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
        .collect::<Result<Vec<_>, safetensors::SafeTensorError>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_VERSION.to_string());
    meta.insert("version".to_string(), env!("CARGO_PKG_VERSION").to_string());
    meta.insert("config".to_string(), serde_json::to_string(model.config())?);
    meta.insert("blend_inputs".to_string(), BLEND_INPUTS.join(","));
    canonical_header(safetensors::serialize(views, Some(meta))?)
}

/// Rewrites the JSON header with sorted metadata keys, so equal models give
/// equal bytes.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>, CheckpointError> {
    let bad = || CheckpointError::Format("truncated header".into());
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(bad)?.try_into().expect("8 bytes")) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(bad)?;
    let mut v: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(header)?;
    if let Some(serde_json::Value::Object(m)) = v.get_mut("__metadata__") {
        let sorted: BTreeMap<String, serde_json::Value> = std::mem::take(m).into_iter().collect();
        *m = sorted.into_iter().collect();
    }
    let mut text = serde_json::to_vec(&v)?;
    text.resize(text.len().next_multiple_of(8), b' ');
    let mut out = Vec::with_capacity(bytes.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

/// Reads only the architecture config from checkpoint bytes.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig, CheckpointError> {
    let (_, meta) = SafeTensors::read_metadata(bytes)?;
    let info = meta.metadata().as_ref().ok_or_else(|| CheckpointError::Format("missing metadata".into()))?;
    if info.get("format").map(String::as_str) != Some(FORMAT_VERSION) {
        return Err(CheckpointError::Format(format!("unsupported format {:?}", info.get("format"))));
    }
    let cfg = info.get("config").ok_or_else(|| CheckpointError::Format("missing config".into()))?;
    Ok(serde_json::from_str(cfg)?)
}

/// Rebuilds a model from checkpoint bytes, checking every parameter is present.
pub fn from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let config = read_config(bytes)?;
    let net = Inbetweener::new(config);
    let expected = net.init_params::<f32>(0);
    let archive = SafeTensors::deserialize(bytes)?;
    let mut params = ParamStore::new();
    for (name, t) in expected.iter() {
        let view = archive.tensor(name).map_err(|_| CheckpointError::Format(format!("missing parameter {name}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != t.shape.as_slice() {
            return Err(CheckpointError::Format(format!("parameter {name} has wrong dtype or shape")));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(name.clone(), Tensor::new(t.shape.clone(), data));
    }
    Ok(Model { net, params })
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model)?)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_models_give_equal_bytes() {
        let a = to_bytes(&Model::new(ModelConfig::compact(), 4)).unwrap();
        for _ in 0..4 {
            assert_eq!(to_bytes(&Model::new(ModelConfig::compact(), 4)).unwrap(), a);
        }
        assert_eq!(to_bytes(&from_bytes(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn round_trip_preserves_everything() {
        let model = Model::new(ModelConfig::compact(), 11);
        let back = from_bytes(&to_bytes(&model).unwrap()).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params.len(), model.params.len());
        for (name, t) in model.params.iter() {
            assert_eq!(back.params.get(name).unwrap().data, t.data, "{name}");
        }
    }

    #[test]
    fn rejects_foreign_archives() {
        let bytes = safetensors::serialize(Vec::<(&str, TensorView)>::new(), None).unwrap();
        assert!(matches!(read_config(&bytes), Err(CheckpointError::Format(_))));
        assert!(from_bytes(b"garbage").is_err());
    }
}
