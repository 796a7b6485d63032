//! Named-array archive container.
//!
//! Layout:
//!
//! ```text
//! magic (6 bytes) | header_len: u64 LE | header JSON (UTF-8) | payload
//! ```
//!
//! The header lists every entry's `name`, `dtype` (`"f32"` or `"f64"`),
//! `shape` and byte `offset` into the payload, plus free-form `metadata`.
//! Payload values are little-endian IEEE-754.
//! Weight files use the magic `BBSW1\0`, latent-code files `BBSFS1`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 6] = *b"BBSW1\0";
pub const CODE_MAGIC: [u8; 6] = *b"BBSFS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub entries: Vec<EntryHeader>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// In-memory archive: ordered entries plus metadata.
#[derive(Clone, Debug, Default)]
pub struct Archive {
    entries: Vec<(String, Dtype, Tensor)>,
    pub metadata: serde_json::Value,
}

impl Archive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            entries: Vec::new(),
            metadata,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, tensor: Tensor) {
        self.entries.push((name.into(), dtype, tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, t)| t)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    /// Fetches an entry and checks its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Dimension {
                block: name.to_string(),
                expected: format!("{:?}", shape),
                got: format!("{:?}", t.shape()),
            });
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn to_bytes(&self, magic: &[u8; 6]) -> Result<Vec<u8>> {
        let mut headers = Vec::with_capacity(self.entries.len());
        let mut payload = Vec::new();
        for (name, dtype, t) in &self.entries {
            headers.push(EntryHeader {
                name: name.clone(),
                dtype: *dtype,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            match dtype {
                Dtype::F32 => {
                    for v in t.data() {
                        payload.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for v in t.data() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let header = serde_json::to_vec(&ArchiveHeader {
            entries: headers,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(6 + 8 + header.len() + payload.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 6], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Archive {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 14 || &bytes[..6] != magic {
            return Err(corrupt(format!(
                "bad magic (expected {:?})",
                String::from_utf8_lossy(magic)
            )));
        }
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let header_end = 14usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header length exceeds file size".into()))?;
        let header: ArchiveHeader = serde_json::from_slice(&bytes[14..header_end])
            .map_err(|e| corrupt(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(n * e.dtype.size())
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| corrupt(format!("entry `{}` overruns payload", e.name)))?;
            let raw = &payload[start..end];
            let data: Vec<f64> = match e.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            entries.push((e.name, e.dtype, Tensor::from_parts(e.shape, data)));
        }
        Ok(Self {
            entries,
            metadata: header.metadata,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn write(&self, path: impl AsRef<Path>, magic: &[u8; 6]) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes(magic)?;
        let tmp = tmp_sibling(path);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>, magic: &[u8; 6]) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, magic, path)
    }
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
