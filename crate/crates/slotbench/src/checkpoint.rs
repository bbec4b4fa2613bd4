//! Single-file checkpoints: a JSON header (model kind, config echo, step,
//! loss, tensor index) followed by little-endian `f32` tensor data.
//!
//! Layout: `MAGIC`, header length as `u64` LE, header bytes, tensor bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use slotbench_core::ParamStore;

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 8] = b"SLBCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the tensor section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model_kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub loss: f64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn new(model_kind: &str, config: serde_json::Value, step: u64, loss: f64, params: &ParamStore<f32>) -> Self {
        let mut tensors = Vec::with_capacity(params.len());
        let mut data = Vec::with_capacity(params.num_scalars());
        for p in params.iter() {
            tensors.push(TensorEntry { name: p.name.clone(), shape: p.shape.clone(), offset: data.len() });
            data.extend_from_slice(&p.data);
        }
        Self { header: Header { model_kind: model_kind.into(), config, step, loss, tensors }, data }
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.header.tensors.iter().find(|t| t.name == name).map(|t| {
            let n: usize = t.shape.iter().product();
            (&t.shape[..], &self.data[t.offset..t.offset + n])
        })
    }

    /// Copy every tensor of `params` from the checkpoint, matching by name
    /// and shape.
    pub fn load_into(&self, params: &mut ParamStore<f32>) -> Result<()> {
        for p in params.iter_mut() {
            let (shape, data) = self
                .tensor(&p.name)
                .ok_or_else(|| HarnessError::Checkpoint(format!("missing tensor {}", p.name)))?;
            if shape != p.shape.as_slice() {
                return Err(HarnessError::Checkpoint(format!("shape mismatch for {}: {:?} vs {:?}", p.name, shape, p.shape)));
            }
            p.data.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| HarnessError::Checkpoint(m.into());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let raw = &bytes[16 + hlen..];
        if raw.len() % 4 != 0 {
            return Err(bad("tensor section is not a whole number of f32 values"));
        }
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if t.offset + n > data.len() {
                return Err(bad("tensor extends past end of file"));
            }
        }
        Ok(Self { header, data })
    }

    /// Write atomically: a temporary file in the target directory is renamed
    /// over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| HarnessError::Missing(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Write `bytes` to `path` via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HarnessError::Io(e.error))?;
    Ok(())
}
