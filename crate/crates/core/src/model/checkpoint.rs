//! Checkpoint archive: safetensors container holding every parameter and
//! buffer under its hierarchical name, with a JSON header in the metadata
//! under the key `header`.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackboneProfile, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub k: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub r: usize,
    pub lambda: f64,
    pub input_size: (usize, usize),
    pub num_identities: usize,
    pub num_clothes: usize,
    pub epoch: usize,
    pub backbone: BackboneProfile,
    pub t2mgs: bool,
}

impl CheckpointHeader {
    pub fn for_model(model: &Model, lambda: f64, epoch: usize) -> Self {
        let c = &model.config;
        Self {
            k: c.k,
            channels: model.channels(),
            r: c.reduction,
            lambda,
            input_size: c.input_size,
            num_identities: c.num_identities,
            num_clothes: c.num_clothes,
            epoch,
            backbone: c.backbone.clone(),
            t2mgs: c.t2mgs,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            input_size: self.input_size,
            k: self.k,
            reduction: self.r,
            num_identities: self.num_identities,
            num_clothes: self.num_clothes,
            t2mgs: self.t2mgs,
        }
    }
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes atomically: a temporary sibling is renamed into place, and removed
/// if anything fails on the way.
pub fn save(model: &Model, header: &CheckpointHeader, path: &Path) -> Result<()> {
    let mut named: Vec<(String, Vec<u8>, usize)> = Vec::new();
    for (name, values) in model.params().into_iter().chain(model.buffers()) {
        named.push((name, to_bytes(values), values.len()));
    }
    let views = named
        .iter()
        .map(|(name, bytes, len)| {
            TensorView::new(Dtype::F64, vec![*len], bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let metadata: HashMap<String, String> = [("header".to_string(), serde_json::to_string(header)?)].into();
    let bytes = safetensors::tensor::serialize(views, &Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))?;

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    if let Err(e) = std::fs::write(&tmp, &bytes) {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    header_from_bytes(&bytes)
}

fn header_from_bytes(bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("header"))
        .ok_or_else(|| Error::Checkpoint("archive has no header".into()))?;
    Ok(serde_json::from_str(text)?)
}

/// Restores a model; every tensor must be present with the right length.
pub fn load(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = header_from_bytes(&bytes)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = Model::new(header.model_config(), 0)?;
    if model.channels() != header.channels {
        return Err(Error::Checkpoint(format!(
            "header declares C={} but the backbone produces C={}",
            header.channels,
            model.channels()
        )));
    }
    let fill = |name: String, dst: &mut [f64]| -> Result<()> {
        let t = tensors
            .tensor(&name)
            .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.dtype() != Dtype::F64 || t.data().len() != dst.len() * 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has the wrong size or type")));
        }
        for (d, chunk) in dst.iter_mut().zip(t.data().chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(())
    };
    for (name, dst) in model.params_mut() {
        fill(name, dst)?;
    }
    for (name, dst) in model.buffers_mut() {
        fill(name, dst)?;
    }
    Ok((model, header))
}
