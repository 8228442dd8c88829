//! Binary container for model checkpoints and neighbor indexes.
//!
//! Layout:
//!
//! ```text
//! b"ECVAE\x01"
//! u64 LE   manifest length in bytes
//! manifest UTF-8 JSON: {"sections": {..}, "tensors": [{name, shape, dtype, offset, bytes}, ..]}
//! payload  little-endian tensor data; offsets are relative to the payload start
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"ECVAE\x01";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not an ECVAE container (bad magic)")]
    BadMagic,
    #[error("container truncated: {0}")]
    Truncated(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("tensor `{name}` has dtype {found}, expected {expected}")]
    Dtype {
        name: String,
        found: String,
        expected: &'static str,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::U32(_) => "u32",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    sections: BTreeMap<String, serde_json::Value>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_section(&mut self, name: &str, meta: serde_json::Value) {
        self.sections.insert(name.to_string(), meta);
    }

    pub fn section(&self, name: &str) -> Result<&serde_json::Value, ContainerError> {
        self.sections
            .get(name)
            .ok_or_else(|| ContainerError::MissingSection(name.to_string()))
    }

    pub fn push_f32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.tensors.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::F32(data),
        });
    }

    pub fn push_u32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<u32>) {
        self.tensors.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::U32(data),
        });
    }

    fn entry(&self, name: &str) -> Result<&Entry, ContainerError> {
        self.tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32]), ContainerError> {
        let e = self.entry(name)?;
        match &e.data {
            TensorData::F32(v) => Ok((&e.shape, v)),
            other => Err(ContainerError::Dtype {
                name: name.into(),
                found: other.dtype().into(),
                expected: "f32",
            }),
        }
    }

    pub fn u32(&self, name: &str) -> Result<(&[usize], &[u32]), ContainerError> {
        let e = self.entry(name)?;
        match &e.data {
            TensorData::U32(v) => Ok((&e.shape, v)),
            other => Err(ContainerError::Dtype {
                name: name.into(),
                found: other.dtype().into(),
                expected: "u32",
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for e in &self.tensors {
            let offset = payload.len() as u64;
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
            tensors.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                dtype: e.data.dtype().to_string(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            sections: self.sections.clone(),
            tensors,
        })
        .expect("manifest serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] = rest
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| ContainerError::Truncated("manifest length".into()))?;
        let mlen = u64::from_le_bytes(len_bytes) as usize;
        let manifest_bytes = rest
            .get(8..8 + mlen)
            .ok_or_else(|| ContainerError::Truncated("manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| ContainerError::Manifest(e.to_string()))?;
        let payload = &rest[8 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for m in manifest.tensors {
            let n: usize = m.shape.iter().product();
            if m.bytes != 4 * n as u64 {
                return Err(ContainerError::Manifest(format!(
                    "tensor `{}` declares {} bytes for shape {:?}",
                    m.name, m.bytes, m.shape
                )));
            }
            let raw = payload
                .get(m.offset as usize..(m.offset + m.bytes) as usize)
                .ok_or_else(|| ContainerError::Truncated(format!("payload of `{}`", m.name)))?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = match m.dtype.as_str() {
                "f32" => TensorData::F32(words.map(f32::from_le_bytes).collect()),
                "u32" => TensorData::U32(words.map(u32::from_le_bytes).collect()),
                other => return Err(ContainerError::Manifest(format!("unknown dtype `{other}`"))),
            };
            debug_assert_eq!(data.len(), n);
            tensors.push(Entry {
                name: m.name,
                shape: m.shape,
                data,
            });
        }
        Ok(Self {
            sections: manifest.sections,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
