//! On-disk container shared by model, quantized-model and compiled-model files.
//!
//! Every artifact is a pair of files: a UTF-8 JSON manifest (`*.json`) and a
//! little-endian binary blob next to it with the same stem (`*.bin`). The
//! manifest lists each tensor as `(dtype, shape, byte offset, byte length, CRC32)`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DType, TensorData};

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a `{expected}` document, found `{found}`")]
    Format { expected: String, found: String },
    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error(
        "tensor `{name}` lies outside the parameter blob (offset {offset}, length {length}, blob {blob_len} bytes)"
    )]
    OutOfBounds {
        name: String,
        offset: usize,
        length: usize,
        blob_len: usize,
    },
    #[error("checksum mismatch for tensor `{name}`: manifest {expected:08x}, payload {actual:08x}")]
    Checksum { name: String, expected: u32, actual: u32 },
    #[error("tensor `{name}`: {reason}")]
    Payload { name: String, reason: String },
}

/// Location and integrity data for one tensor in the blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
    pub crc32: u32,
}

/// Common header fields carried by every manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub format_version: u32,
}

impl Header {
    pub fn new(format: &str, version: u32) -> Self {
        Self {
            format: format.to_string(),
            format_version: version,
        }
    }

    pub fn check(&self, format: &str, version: u32) -> Result<(), ContainerError> {
        if self.format != format {
            return Err(ContainerError::Format {
                expected: format.to_string(),
                found: self.format.clone(),
            });
        }
        if self.format_version != version {
            return Err(ContainerError::Version {
                found: self.format_version,
                supported: version,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
    records: Vec<TensorRecord>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index in the record table.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &TensorData) -> usize {
        let payload = data.to_le_bytes();
        let record = TensorRecord {
            name: name.into(),
            dtype: data.dtype(),
            shape: shape.to_vec(),
            offset: self.bytes.len(),
            length: payload.len(),
            crc32: crc32fast::hash(&payload),
        };
        self.bytes.extend_from_slice(&payload);
        self.records.push(record);
        self.records.len() - 1
    }

    pub fn finish(self) -> (Vec<TensorRecord>, Vec<u8>) {
        (self.records, self.bytes)
    }
}

/// Reads and verifies one tensor payload.
pub fn read_tensor(record: &TensorRecord, blob: &[u8]) -> Result<TensorData, ContainerError> {
    let end = record.offset.checked_add(record.length);
    let payload = match end {
        Some(end) if end <= blob.len() => &blob[record.offset..end],
        _ => {
            return Err(ContainerError::OutOfBounds {
                name: record.name.clone(),
                offset: record.offset,
                length: record.length,
                blob_len: blob.len(),
            })
        }
    };
    let actual = crc32fast::hash(payload);
    if actual != record.crc32 {
        return Err(ContainerError::Checksum {
            name: record.name.clone(),
            expected: record.crc32,
            actual,
        });
    }
    let expected_elems: usize = record.shape.iter().product();
    let data = TensorData::from_le_bytes(record.dtype, payload).ok_or_else(|| ContainerError::Payload {
        name: record.name.clone(),
        reason: "length is not a multiple of the element size".into(),
    })?;
    if data.len() != expected_elems {
        return Err(ContainerError::Payload {
            name: record.name.clone(),
            reason: format!(
                "{} elements stored, shape {:?} needs {}",
                data.len(),
                record.shape,
                expected_elems
            ),
        });
    }
    Ok(data)
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ContainerError + '_ {
    move |source| ContainerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `manifest` to `path` and `blob` next to it.
pub fn save<M: Serialize>(path: &Path, manifest: &M, blob: &[u8]) -> Result<(), ContainerError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))?;
    let bin = blob_path(path);
    fs::write(&bin, blob).map_err(io_err(&bin))?;
    Ok(())
}

/// Loads a manifest and its blob. The header is checked before the body is parsed
/// so that version errors take precedence over schema errors.
pub fn load<M: DeserializeOwned>(path: &Path, format: &str, version: u32) -> Result<(M, Vec<u8>), ContainerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let header: Header = serde_json::from_str(&text)?;
    header.check(format, version)?;
    let manifest = serde_json::from_str(&text)?;
    let bin = blob_path(path);
    let blob = fs::read(&bin).map_err(io_err(&bin))?;
    Ok((manifest, blob))
}

/// Writes any serializable value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ContainerError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ContainerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
