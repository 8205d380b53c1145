//! Binary model checkpoints.
//!
//! Layout: `TDLM`, one version byte, a little-endian `u32` header length, a
//! UTF-8 JSON header, then every tensor as little-endian `f32` in header order.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use kdlab_core::tensor::Tensor;
use kdlab_core::transformer::{ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"TDLM";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    tokenizer: Option<String>,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
    /// Fingerprint of the tokenizer the embeddings index into.
    pub tokenizer: Option<String>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams<Tensor>, tokenizer: Option<String>, step: u64) -> Self {
        Self { config, params, tokenizer, step }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (name, t) in self.params.named() {
            tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: data.len() });
            for &v in t.data() {
                data.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let header = Header {
            dtype: "f32".into(),
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            step: self.step,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(9 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&u32::try_from(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 9, "checkpoint truncated: {} bytes", bytes.len());
        ensure!(&bytes[..4] == MAGIC, "not a checkpoint: bad magic");
        if bytes[4] != VERSION {
            bail!("unsupported checkpoint version {} (expected {VERSION})", bytes[4]);
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into()?) as usize;
        let body = &bytes[9..];
        ensure!(body.len() >= len, "checkpoint truncated inside the header");
        let header: Header = serde_json::from_slice(&body[..len]).context("checkpoint header")?;
        ensure!(header.dtype == "f32", "unsupported dtype {}", header.dtype);
        let data = &body[len..];
        header.config.validate()?;

        // Shapes and names come from a template built from the stored config.
        let template = ModelParams::init(&header.config, 0)?;
        let names = template.named();
        ensure!(
            names.len() == header.tensors.len(),
            "checkpoint has {} tensors, config implies {}",
            header.tensors.len(),
            names.len()
        );
        let mut expected_offset = 0;
        for ((name, t), e) in names.iter().zip(&header.tensors) {
            ensure!(*name == e.name && t.shape() == e.shape.as_slice(), "tensor {} does not match the config", e.name);
            ensure!(e.offset == expected_offset, "tensor {} at unexpected offset {}", e.name, e.offset);
            expected_offset += 4 * t.len();
        }
        ensure!(data.len() >= expected_offset, "checkpoint truncated: {} of {expected_offset} data bytes", data.len());
        ensure!(data.len() == expected_offset, "{} trailing bytes after tensor data", data.len() - expected_offset);
        let mut entries = header.tensors.iter();
        let params = template.try_map(|t| {
            let e = entries.next().expect("counted above");
            let raw = &data[e.offset..e.offset + 4 * t.len()];
            let values =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            Tensor::new(e.shape.clone(), values)
        })?;
        Ok(Self { config: header.config, params, tokenizer: header.tokenizer, step: header.step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use kdlab_core::transformer::{forward_values, EncoderInput, HeadConfig, HeadKind};

    use super::*;

    fn sample(head: bool) -> Checkpoint {
        let mut cfg = ModelConfig { layers: 2, hidden: 8, heads: 2, ffn: 16, vocab_size: 20, max_seq: 12, ..Default::default() };
        let mut p = ModelParams::init(&cfg, 5).unwrap();
        if head {
            p = p.with_head(&mut cfg, HeadConfig { kind: HeadKind::Classify, outputs: 2 }, 6).unwrap();
        }
        Checkpoint::new(cfg, p, Some("abc".into()), 42)
    }

    #[test]
    fn roundtrip_is_exact_at_stored_precision() {
        for head in [false, true] {
            let a = Checkpoint::from_bytes(&sample(head).to_bytes().unwrap()).unwrap();
            let bytes = a.to_bytes().unwrap();
            let b = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(a, b);
            assert_eq!(b.to_bytes().unwrap(), bytes);
            let ids = [2u32, 9, 10, 11, 3, 0];
            let pad = [false, false, false, false, false, true];
            let input = || EncoderInput { ids: &ids, pad: &pad, batch: 1, seq: 6 };
            let (_, fa, _) = forward_values(&a.params, &a.config, input()).unwrap();
            let (_, fb, _) = forward_values(&b.params, &b.config, input()).unwrap();
            assert!(fa.bit_eq(&fb));
        }
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = sample(true).to_bytes().unwrap();
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut v = bytes.clone();
        v[4] = 9;
        let err = Checkpoint::from_bytes(&v).unwrap_err().to_string();
        assert!(err.contains("unsupported checkpoint version 9"), "{err}");
        let mut m = bytes;
        m[0] = b'X';
        assert!(Checkpoint::from_bytes(&m).is_err());
    }
}
