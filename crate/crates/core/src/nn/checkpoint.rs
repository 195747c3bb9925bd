//! Self-describing parameter container.
//!
//! ```text
//! magic    8 bytes   "CGCKPT01"
//! length   u64 LE    byte length of the manifest
//! manifest JSON      vocab hash, config digest, named sections, tensor table
//! payload  f64 LE    tensor values, row-major, in manifest order
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CGCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    /// Offset into the payload, in values.
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    vocab_hash: String,
    config_digest: String,
    sections: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab_hash: String,
    pub config_digest: String,
    /// Free-form metadata, e.g. the model configuration and class names.
    pub sections: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    byte_order: "little".into(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let manifest = Manifest {
            format_version: 1,
            vocab_hash: self.vocab_hash.clone(),
            config_digest: self.config_digest.clone(),
            sections: self.sections.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
        let io = |e: std::io::Error| Error::Invalid(format!("writing checkpoint: {e}"));
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        let mut buf = Vec::with_capacity(offset * 8);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf).map_err(io)
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |m: String| Error::Incompatible(m);
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|e| bad(format!("reading header: {e}")))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        input
            .read_exact(&mut json)
            .map_err(|e| bad(format!("reading manifest: {e}")))?;
        let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != 1 {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        let mut payload = Vec::new();
        input.read_to_end(&mut payload).map_err(|e| bad(e.to_string()))?;
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" || e.byte_order != "little" {
                return Err(bad(format!(
                    "tensor {}: unsupported {}/{}",
                    e.name, e.dtype, e.byte_order
                )));
            }
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor {} runs past the payload", e.name)))?;
            tensors.push((e.name, Tensor::from_vec(&e.shape, data.to_vec())?));
        }
        Ok(Checkpoint {
            vocab_hash: manifest.vocab_hash,
            config_digest: manifest.config_digest,
            sections: manifest.sections,
            tensors,
        })
    }
}
