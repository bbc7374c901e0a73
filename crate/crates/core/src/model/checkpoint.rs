//! Versioned binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LRLF-CKPT"                 9 bytes
//! version                     u32 (currently 1)
//! header length               u32
//! header                      JSON {"config": ModelConfig, "meta": CheckpointMeta}
//! tensor count                u32
//! per tensor:
//!   name length               u32
//!   name                      UTF-8
//!   ndim                      u32
//!   dims                      ndim x u64
//!   data                      prod(dims) x f32
//! ```
//!
//! Tensors appear in [`Layout`] order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Layout;
use super::{Model, ModelConfig};

pub const MAGIC: &[u8; 9] = b"LRLF-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch at tensor {tensor}: checkpoint has {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Training provenance stamped on every saved checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub updates: u64,
    pub valid_nll: Option<f64>,
    pub valid_bleu: Option<f64>,
    /// Serialized vocabulary, so a checkpoint can translate on its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Vec<f32>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model<f32>, meta: CheckpointMeta) -> Self {
        Self {
            config: model.cfg.clone(),
            params: model.params.clone(),
            meta,
        }
    }

    pub fn model(&self) -> Model<f32> {
        Model::from_params(self.config.clone(), self.params.clone()).expect("checkpoint validated on load")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = Layout::new(&self.config);
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + self.params.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(layout.tensors.len() as u32).to_le_bytes());
        for t in &layout.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &self.params[t.range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint, checking every tensor against the shapes its own
    /// header config implies.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        Self::parse(bytes, None)
    }

    /// Like [`from_bytes`](Self::from_bytes) but also requires the tensors
    /// to fit `expected`.
    pub fn from_bytes_for(bytes: &[u8], expected: &ModelConfig) -> Result<Self, CheckpointError> {
        Self::parse(bytes, Some(expected))
    }

    fn parse(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let target = expected.unwrap_or(&header.config);
        let layout = Layout::new(target);
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(layout.total);
        for i in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("tensor {name}: {ndim} dims")));
            }
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let spec = layout.tensors.get(i);
            match spec {
                Some(s) if s.name == name && s.shape == dims => {}
                Some(s) => {
                    return Err(CheckpointError::ShapeMismatch {
                        tensor: s.name.clone(),
                        expected: s.shape.clone(),
                        found: dims,
                    })
                }
                None => return Err(CheckpointError::Corrupt(format!("unexpected tensor {name}"))),
            }
            let n: usize = dims.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| CheckpointError::Corrupt("tensor too large".into()))?,
            )?;
            params.extend(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
        }
        if count < layout.tensors.len() {
            let s = &layout.tensors[count];
            return Err(CheckpointError::ShapeMismatch {
                tensor: s.name.clone(),
                expected: s.shape.clone(),
                found: Vec::new(),
            });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            config: header.config,
            params,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        // Write to a sibling and rename so a crash never leaves a torn file.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&read_all(path)?)
    }

    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self, CheckpointError> {
        Self::from_bytes_for(&read_all(path)?, expected)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> ModelCheckpoint {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 4,
            heads: 2,
            ffn_dim: 8,
            vocab_size: 7,
            max_len: 6,
            dropout: 0.1,
        };
        let m = Model::<f32>::init(cfg, 1).unwrap();
        ModelCheckpoint::from_model(
            &m,
            CheckpointMeta {
                stage: "ft".into(),
                updates: 40,
                valid_nll: Some(1.234_567_890_123),
                valid_bleu: None,
                vocab: None,
            },
        )
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = ckpt();
        let b = c.to_bytes();
        let back = ModelCheckpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let b = ckpt().to_bytes();
        for cut in [0, 5, 12, 40, b.len() - 1] {
            assert!(matches!(
                ModelCheckpoint::from_bytes(&b[..cut]),
                Err(CheckpointError::Corrupt(_))
            ));
        }
        let mut v = b.clone();
        v[9] = 2;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&v),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn wrong_config_names_first_tensor() {
        let b = ckpt().to_bytes();
        let big = ModelConfig::mbart_large(7);
        match ModelCheckpoint::from_bytes_for(&b, &big) {
            Err(CheckpointError::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "embed.tokens"),
            other => panic!("{other:?}"),
        }
    }
}
