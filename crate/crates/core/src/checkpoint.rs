//! Model archive: every named tensor plus the config that built the model.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, a JSON header, then
//! the tensors as consecutive little-endian f64 values. All integers are
//! little-endian.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamKind;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LDCNCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
    /// Element offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for id in model.params.ids() {
        let t = model.params.value(id);
        tensors.push(TensorEntry {
            name: model.params.name(id).to_string(),
            shape: t.shape().to_vec(),
            buffer: model.params.kind(id) == ParamKind::Buffer,
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(20 + header.len() + offset * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for id in model.params.ids() {
        for v in model.params.value(id).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let s = bytes
        .get(*at..*at + n)
        .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
    *at += n;
    Ok(s)
}

/// Rebuilds the model from its stored config and overwrites every tensor.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut at = 0;
    if take(&bytes, &mut at, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a model archive", path.display())));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let header_len = u64::from_le_bytes(take(&bytes, &mut at, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&bytes, &mut at, header_len)?)?;
    let payload = &bytes[at..];
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64 values".into()));
    }

    let mut model = Model::new(&header.config, 0)?;
    let mut seen = HashSet::new();
    for e in &header.tensors {
        let id = model.params.id(&e.name).ok_or_else(|| {
            Error::Checkpoint(format!("archive tensor `{}` is not part of the model", e.name))
        })?;
        let numel: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let raw = payload
            .get(start..start + numel * 8)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model
            .params
            .set(id, Tensor::new(e.shape.clone(), data)?)
            .map_err(|err| Error::Checkpoint(format!("tensor `{}`: {err}", e.name)))?;
        seen.insert(id);
    }
    if let Some(missing) = model.params.ids().find(|id| !seen.contains(id)) {
        return Err(Error::Checkpoint(format!(
            "archive has no tensor `{}`",
            model.params.name(missing)
        )));
    }
    Ok(model)
}
