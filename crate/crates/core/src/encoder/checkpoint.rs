//! Binary model checkpoint.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, a JSON
//! header describing every tensor shape, then all tensors as row-major f32 LE
//! in header order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderModel, FieldHead, MatchHead, MlpHead, Projection};
use crate::error::{Error, Result};
use crate::jsonl::write_atomic;
use crate::numcore::{Activation, DenseLayer, Parameters};

const MAGIC: &[u8; 8] = b"BLGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderModel<f32>,
    pub match_head: Option<MatchHead<f32>>,
    pub field_head: Option<FieldHead<f32>>,
    pub field_vocab: Vec<String>,
    /// Free-form training metadata echoed into the header.
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerShape {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    encoder: EncoderConfig,
    match_head: Option<Vec<LayerShape>>,
    field_head: Option<Vec<LayerShape>>,
    field_vocab: Vec<String>,
    metadata: serde_json::Value,
    tensor_lengths: Vec<usize>,
}

fn shapes(head: &MlpHead<f32>) -> Vec<LayerShape> {
    head.layers
        .iter()
        .map(|l| LayerShape {
            in_dim: l.in_dim(),
            out_dim: l.out_dim(),
            activation: l.activation,
        })
        .collect()
}

fn head_from_shapes(shapes: &[LayerShape]) -> MlpHead<f32> {
    MlpHead {
        layers: shapes
            .iter()
            .map(|s| DenseLayer::zeros(s.in_dim, s.out_dim, s.activation))
            .collect(),
    }
}

impl Checkpoint {
    fn tensors(&self) -> Vec<&[f32]> {
        let mut out = self.encoder.tensors();
        if let Some(h) = &self.match_head {
            out.extend(h.0.tensors());
        }
        if let Some(h) = &self.field_head {
            out.extend(h.0.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = self.encoder.tensors_mut();
        if let Some(h) = &mut self.match_head {
            out.extend(h.0.tensors_mut());
        }
        if let Some(h) = &mut self.field_head {
            out.extend(h.0.tensors_mut());
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            encoder: self.encoder.config.clone(),
            match_head: self.match_head.as_ref().map(|h| shapes(&h.0)),
            field_head: self.field_head.as_ref().map(|h| shapes(&h.0)),
            field_vocab: self.field_vocab.clone(),
            metadata: self.metadata.clone(),
            tensor_lengths: tensors.iter().map(|t| t.len()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let total: usize = tensors.iter().map(|t| t.len()).sum();
        let mut bytes = Vec::with_capacity(20 + header.len() + 4 * total);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for t in tensors {
            for x in t {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        let cfg = header.encoder.clone();
        let (h, d) = (cfg.features.hash_size, cfg.dim);
        let encoder = EncoderModel {
            projection: Projection {
                table: Array2::zeros((h, d)),
                bias: Array1::zeros(d),
            },
            hidden: cfg.hidden.iter().map(|&a| DenseLayer::zeros(d, d, a)).collect(),
            config: cfg,
        };
        let mut ckpt = Checkpoint {
            encoder,
            match_head: header.match_head.as_deref().map(|s| MatchHead(head_from_shapes(s))),
            field_head: header.field_head.as_deref().map(|s| FieldHead(head_from_shapes(s))),
            field_vocab: header.field_vocab,
            metadata: header.metadata,
        };
        let mut data = &bytes[20 + header_len..];
        let mut tensors = ckpt.tensors_mut();
        if tensors.len() != header.tensor_lengths.len() {
            return Err(bad("tensor count disagrees with header"));
        }
        for (t, &len) in tensors.iter_mut().zip(&header.tensor_lengths) {
            if t.len() != len {
                return Err(Error::Checkpoint(format!(
                    "tensor length {len} disagrees with declared shapes ({})",
                    t.len()
                )));
            }
            if data.len() < 4 * len {
                return Err(bad("truncated tensor data"));
            }
            for (x, chunk) in t.iter_mut().zip(data[..4 * len].chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[4 * len..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensors"));
        }
        drop(tensors);
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::{FeatureConfig, HeadConfig};
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = EncoderConfig {
            dim: 4,
            features: FeatureConfig {
                hash_size: 32,
                ..FeatureConfig::default()
            },
            ..EncoderConfig::default()
        };
        let head = HeadConfig { width: 3, depth: 2 };
        Checkpoint {
            encoder: EncoderModel::new(cfg, 1),
            match_head: Some(MatchHead::new(4, head, 2)),
            field_head: Some(FieldHead::new(4, 5, head, 3)),
            field_vocab: (0..5).map(|i| format!("f{i}")).collect(),
            metadata: serde_json::json!({"seed": 1}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let enc_only = Checkpoint {
            match_head: None,
            field_head: None,
            ..c
        };
        assert_eq!(Checkpoint::from_bytes(&enc_only.to_bytes().unwrap()).unwrap(), enc_only);
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
        assert!(Checkpoint::from_bytes(b"hello world, not a model").is_err());
        let mut short = sample().to_bytes().unwrap();
        short.truncate(short.len() - 3);
        assert!(Checkpoint::from_bytes(&short).is_err());
    }
}
