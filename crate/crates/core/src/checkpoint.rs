//! Model serialization.
//!
//! Layout: an 8-byte magic string, a little-endian u64 header length, a JSON
//! header, then every parameter tensor as raw little-endian f64 values. The
//! header records the config, the linearization scheme, the tag set, free-form
//! run metadata, and the name/shape/element-offset of each tensor, so a file
//! is self-describing and loads back bitwise identical.

use crate::baseline::{bio_labels, BaselineConfig, BaselineModel};
use crate::linearizer::Scheme;
use crate::model::{ModelConfig, PointerModel};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"NERGEN01";

pub const KIND_POINTER: &str = "pointer";
pub const KIND_TAGGER: &str = "tagger";
pub const KIND_TAGGER_CRF: &str = "tagger-crf";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file: bad magic")]
    BadMagic,
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint holds a {found} model, expected {want}")]
    WrongKind { found: String, want: String },
    #[error("checkpoint holds tensor {name} with shape [{rows}, {cols}], model expects [{want_rows}, {want_cols}]")]
    ShapeMismatch {
        name: String,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint payload ends early")]
    Truncated,
    #[error("invalid stored config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything about a trained model that is not a parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scheme: Scheme,
    pub tags: Vec<String>,
    /// Free-form run settings (optimizer coefficients, seeds, epochs).
    #[serde(default)]
    pub extra: Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Element offset from the start of the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(default = "default_kind")]
    kind: String,
    config: Value,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn default_kind() -> String {
    KIND_POINTER.to_string()
}

fn write_checkpoint(
    path: &Path,
    kind: &str,
    config: Value,
    meta: &CheckpointMeta,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::new();
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows,
            cols: t.cols,
            offset,
        });
        offset += t.data.len();
    }
    let header = Header {
        kind: kind.to_string(),
        config,
        meta: meta.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in store.iter() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(Header, Vec<u8>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

/// Overwrites a freshly built store from the header's tensor table.
fn fill_store(
    store: &mut ParamStore,
    header: &Header,
    payload: &[u8],
) -> Result<(), CheckpointError> {
    for entry in &header.tensors {
        let id = store
            .id_of(&entry.name)
            .ok_or_else(|| CheckpointError::MissingTensor(entry.name.clone()))?;
        let want = store.tensor(id).shape();
        if want != (entry.rows, entry.cols) {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                rows: entry.rows,
                cols: entry.cols,
                want_rows: want.0,
                want_cols: want.1,
            });
        }
        let count = entry.rows * entry.cols;
        let start = entry.offset * 8;
        let end = start + count * 8;
        if end > payload.len() {
            return Err(CheckpointError::Truncated);
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        *store.tensor_mut(id) = Tensor::from_data(entry.rows, entry.cols, data);
    }
    // a rebuilt store defines the same parameter set, so name resolution is
    // enough only when the counts agree too
    if header.tensors.len() != store.len() {
        let stored: std::collections::HashSet<&str> =
            header.tensors.iter().map(|t| t.name.as_str()).collect();
        for (name, _) in store.iter() {
            if !stored.contains(name) {
                return Err(CheckpointError::MissingTensor(name.to_string()));
            }
        }
    }
    Ok(())
}

pub fn save_model(
    path: &Path,
    model: &PointerModel,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let config = serde_json::to_value(&model.config)?;
    write_checkpoint(path, KIND_POINTER, config, meta, &model.store)
}

pub fn load_model(path: &Path) -> Result<(PointerModel, CheckpointMeta), CheckpointError> {
    let (header, payload) = read_checkpoint(path)?;
    if header.kind != KIND_POINTER {
        return Err(CheckpointError::WrongKind {
            found: header.kind,
            want: KIND_POINTER.to_string(),
        });
    }
    let config: ModelConfig = serde_json::from_value(header.config.clone())?;
    let mut model =
        PointerModel::new(config, 0).map_err(|e| CheckpointError::Config(e.to_string()))?;
    fill_store(&mut model.store, &header, &payload)?;
    Ok((model, header.meta))
}

pub fn save_baseline(
    path: &Path,
    model: &BaselineModel,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let kind = if model.config.crf {
        KIND_TAGGER_CRF
    } else {
        KIND_TAGGER
    };
    let config = serde_json::to_value(&model.config)?;
    write_checkpoint(path, kind, config, meta, &model.store)
}

pub fn load_baseline(path: &Path) -> Result<(BaselineModel, CheckpointMeta), CheckpointError> {
    let (header, payload) = read_checkpoint(path)?;
    if header.kind != KIND_TAGGER && header.kind != KIND_TAGGER_CRF {
        return Err(CheckpointError::WrongKind {
            found: header.kind,
            want: format!("{KIND_TAGGER} or {KIND_TAGGER_CRF}"),
        });
    }
    let config: BaselineConfig = serde_json::from_value(header.config.clone())?;
    let labels = bio_labels(&header.meta.tags);
    let mut model = BaselineModel::new(config, labels, 0)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    fill_store(&mut model.store, &header, &payload)?;
    Ok((model, header.meta))
}

/// The stored model kind, for dispatch before a full load.
pub fn peek_kind(path: &Path) -> Result<String, CheckpointError> {
    let (header, _) = read_checkpoint(path)?;
    Ok(header.kind)
}
