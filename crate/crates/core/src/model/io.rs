//! Weight files.
//!
//! Layout (little endian):
//!
//! ```text
//! b"TFMW"            magic
//! u32                format version (1)
//! u32                header length in bytes
//! [u8; header_len]   JSON header: config, input_scale, codebook_checksum, tensor shapes
//! f64 * N            tensor data, row-major, in header order
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights, Params};
use crate::codebook::Codebook;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TFMW";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    input_scale: Vec<f64>,
    codebook_checksum: u64,
    shapes: Vec<(usize, usize)>,
}

impl ModelWeights {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config,
            input_scale: self.input_scale.clone(),
            codebook_checksum: self.codebook_checksum,
            shapes: self.params.tensors().iter().map(|t| t.dim()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |range: std::ops::Range<usize>| {
            bytes
                .get(range)
                .ok_or_else(|| Error::Format("truncated weight file".into()))
        };
        if take(0..4)? != MAGIC {
            return Err(Error::Format("not a weight file".into()));
        }
        let version = u32::from_le_bytes(take(4..8)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight version {version}")));
        }
        let hlen = u32::from_le_bytes(take(8..12)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(12..12 + hlen)?)
            .map_err(|e| Error::Format(format!("weight header: {e}")))?;
        header.config.validate()?;
        let mut params = Params::zeros(&header.config);
        if header.shapes.len() != params.tensors().len() {
            return Err(Error::Format("wrong tensor count".into()));
        }
        let mut pos = 12 + hlen;
        for (t, &(r, c)) in params.tensors_mut().into_iter().zip(&header.shapes) {
            if t.dim() != (r, c) {
                return Err(Error::Format(format!(
                    "tensor shape {:?} does not match config ({r}, {c})",
                    t.dim()
                )));
            }
            let n = r * c;
            let raw = take(pos..pos + 8 * n)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                .collect();
            *t = Array2::from_shape_vec((r, c), data).map_err(|e| Error::Format(e.to_string()))?;
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        let weights = ModelWeights {
            config: header.config,
            params,
            input_scale: header.input_scale,
            codebook_checksum: header.codebook_checksum,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::mot_io::write_text(path, self.to_bytes())
    }

    /// Loads weights and refuses them if they were trained against a
    /// different codebook.
    pub fn load(path: &Path, codebook: &Codebook) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let w = ModelWeights::from_bytes(&bytes)?;
        w.check_codebook(codebook)?;
        Ok(w)
    }

    pub fn check_codebook(&self, codebook: &Codebook) -> Result<()> {
        if self.codebook_checksum != codebook.checksum() {
            return Err(Error::CodebookMismatch {
                expected: self.codebook_checksum,
                actual: codebook.checksum(),
            });
        }
        if self.config.num_clusters != codebook.k() {
            return Err(Error::Config(format!(
                "model has {} clusters, codebook has {}",
                self.config.num_clusters,
                codebook.k()
            )));
        }
        Ok(())
    }
}
