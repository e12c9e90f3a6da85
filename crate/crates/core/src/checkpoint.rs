//! Checkpoint files.
//!
//! Layout: the 8 bytes `LCKV0001`, a little-endian `u32` header length, a
//! JSON header mapping each tensor name to `{dtype, shape, byte_offset}`,
//! then the raw little-endian tensor data. Offsets are relative to the
//! start of the data section and tensors are stored in header key order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelWeights};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"LCKV0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a checkpoint: expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("checkpoint truncated: need {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },

    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),

    #[error("checkpoint does not match the configuration: {0}")]
    GeometryMismatch(String),
}

impl CheckpointError {
    /// Stable identifier for each failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Io(_) => "checkpoint-io",
            CheckpointError::BadMagic { .. } => "checkpoint-bad-magic",
            CheckpointError::Truncated { .. } => "checkpoint-truncated",
            CheckpointError::BadHeader(_) => "checkpoint-bad-header",
            CheckpointError::GeometryMismatch(_) => "checkpoint-geometry-mismatch",
        }
    }
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

impl TensorEntry {
    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.size_of()
    }
}

pub type Header = BTreeMap<String, TensorEntry>;

pub fn to_bytes<T: Scalar>(weights: &ModelWeights<T>) -> Vec<u8> {
    let named: BTreeMap<String, &Arc<Tensor<T>>> = weights.named().into_iter().collect();
    let mut header = Header::new();
    let mut offset = 0;
    for (name, t) in &named {
        let entry = TensorEntry { dtype: T::DTYPE, shape: t.shape().to_vec(), byte_offset: offset };
        offset += entry.byte_len();
        header.insert(name.clone(), entry);
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in named.values() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    out
}

pub fn write<T: Scalar>(weights: &ModelWeights<T>, path: &Path) -> CkResult<()> {
    std::fs::write(path, to_bytes(weights))?;
    Ok(())
}

/// Header and data section of a checkpoint, checked for internal consistency.
pub fn parse(bytes: &[u8]) -> CkResult<(Header, &[u8])> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(CheckpointError::Truncated { needed, available: bytes.len() })
        } else {
            Ok(())
        }
    };
    need(8)?;
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    need(12)?;
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    need(12 + len)?;
    let header: Header =
        serde_json::from_slice(&bytes[12..12 + len]).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let data = &bytes[12 + len..];
    let mut expected_offset = 0;
    for (name, e) in &header {
        if e.byte_offset != expected_offset {
            return Err(CheckpointError::BadHeader(format!(
                "{name} starts at byte {}, expected {expected_offset}",
                e.byte_offset
            )));
        }
        expected_offset += e.byte_len();
    }
    if data.len() < expected_offset {
        return Err(CheckpointError::Truncated { needed: 12 + len + expected_offset, available: bytes.len() });
    }
    if data.len() > expected_offset {
        return Err(CheckpointError::BadHeader(format!("{} trailing bytes", data.len() - expected_offset)));
    }
    Ok((header, data))
}

fn decode_tensor<T: Scalar>(e: &TensorEntry, data: &[u8]) -> Tensor<T> {
    let bytes = &data[e.byte_offset..e.byte_offset + e.byte_len()];
    let values: Vec<T> = match e.dtype {
        DType::Float32 => bytes.chunks_exact(4).map(|c| T::lit(f64::from(f32::read_le(c)))).collect(),
        DType::Float64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    };
    Tensor::new(e.shape.clone(), values).expect("entry shape matches its byte length")
}

/// Decodes weights for `config`. Tensor names and shapes must match the
/// configuration exactly; stored values are converted to `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8], config: &ModelConfig) -> CkResult<ModelWeights<T>> {
    let (header, data) = parse(bytes)?;
    let template = Model::<T>::random(config.clone(), 0, Default::default())
        .map_err(|e| CheckpointError::GeometryMismatch(e.to_string()))?
        .into_weights();
    let expected: BTreeMap<String, Vec<usize>> =
        template.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    for name in header.keys() {
        if !expected.contains_key(name) {
            return Err(CheckpointError::GeometryMismatch(format!("unexpected tensor {name}")));
        }
    }
    template.try_map(|name, _| {
        let e = header
            .get(name)
            .ok_or_else(|| CheckpointError::GeometryMismatch(format!("missing tensor {name}")))?;
        if e.shape != expected[name] {
            return Err(CheckpointError::GeometryMismatch(format!(
                "{name} has shape {:?}, configuration expects {:?}",
                e.shape, expected[name]
            )));
        }
        Ok(Arc::new(decode_tensor(e, data)))
    })
}

pub fn read<T: Scalar>(path: &Path, config: &ModelConfig) -> CkResult<ModelWeights<T>> {
    from_bytes(&std::fs::read(path)?, config)
}

pub fn load_model<T: Scalar>(path: &Path, config: &ModelConfig) -> crate::Result<Model<T>> {
    Model::from_weights(config.clone(), read(path, config)?)
}
