//! Checkpoint files: safetensors payload with a JSON header carried in the
//! safetensors metadata map.
//!
//! Metadata keys:
//! - `format`: always `sing-checkpoint`
//! - `format_version`: integer, currently [`FORMAT_VERSION`]
//! - `kind`: `jscc`, `ddpm` or `inn`
//! - `config`: JSON of the component's architecture config
//! - `config_hash`: sha256 hex of `config`
//! - `training`: JSON training metadata (may be `null`)

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::nn::ParamStore;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "sing-checkpoint";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config_json: String,
    pub config_hash: String,
    pub training_json: String,
}

impl CheckpointHeader {
    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_str(&self.config_json)?)
    }

    pub fn training<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_str(&self.training_json)?)
    }
}

pub fn save<C: Serialize, M: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    training: &M,
    params: &ParamStore,
) -> Result<()> {
    let config_json = serde_json::to_string(config)?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_TAG.to_string());
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("kind".to_string(), kind.to_string());
    meta.insert("config_hash".to_string(), sha256_hex(config_json.as_bytes()));
    meta.insert("config".to_string(), config_json);
    meta.insert("training".to_string(), serde_json::to_string(training)?);

    let mut buffers = Vec::with_capacity(params.entries().len());
    for (name, var) in params.entries() {
        let t = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?;
        let bytes: Vec<u8> = t
            .to_vec1::<f64>()?
            .into_iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        buffers.push((name.clone(), var.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    safetensors::serialize_to_file(views, Some(meta), path)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(())
}

/// Reads the header only, validating format and kind.
pub fn read_header(path: &Path, expected_kind: &str) -> Result<(CheckpointHeader, Vec<u8>)> {
    let buf = std::fs::read(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    let (_, st_meta) =
        SafeTensors::read_metadata(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = st_meta
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {k}")))
    };
    if get("format")? != FORMAT_TAG {
        return Err(Error::Checkpoint("not a sing checkpoint".into()));
    }
    let version: u32 = get("format_version")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format_version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind = get("kind")?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "expected a `{expected_kind}` checkpoint, found `{kind}`"
        )));
    }
    let header = CheckpointHeader {
        kind,
        config_json: get("config")?,
        config_hash: get("config_hash")?,
        training_json: get("training")?,
    };
    if sha256_hex(header.config_json.as_bytes()) != header.config_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    Ok((header, buf))
}

/// Copies every stored tensor into the matching parameter of `params`.
pub fn load_params(buf: &[u8], params: &ParamStore) -> Result<()> {
    let st = SafeTensors::deserialize(buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let stored: HashMap<String, TensorView> = st.tensors().into_iter().collect();
    for (name, var) in params.entries() {
        let view = stored
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing from file")))?;
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!("parameter {name}: unexpected dtype")));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
        if var.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} in file, {:?} in model",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
    }
    if stored.len() != params.entries().len() {
        return Err(Error::Checkpoint(format!(
            "file holds {} tensors, model expects {}",
            stored.len(),
            params.entries().len()
        )));
    }
    Ok(())
}
