//! Version-tagged binary container for named f32 tensors.
//!
//! Layout: 8-byte magic, little-endian u32 header length, a JSON header
//! carrying arbitrary metadata plus a tensor manifest (name, shape, byte
//! offset, byte length into the payload), then the raw little-endian f32
//! payload. Writing is byte-deterministic for fixed contents: tensors are
//! sorted by name and the JSON map is order-stable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FeatureSchema;
use crate::embed::EvatVariant;
use crate::gradcheck::ParamSet;
use crate::model::{LossConfig, ModelConfig};
use crate::summarize::{Normalizer, SummarizationConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SMTCKPT\0";
const VERSION: u32 = 1;
/// Upper bound on the JSON header; rejects nonsense length fields early.
const MAX_HEADER_LEN: usize = 64 * 1024 * 1024;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    byte_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded container: a kind tag, free-form JSON metadata, and named
/// tensors sorted by name.
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("container has no tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sorted: Vec<&(String, Tensor<f32>)> = self.tensors.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut entries = Vec::with_capacity(sorted.len());
        let mut offset = 0usize;
        for (name, t) in &sorted {
            let byte_len = t.data().len() * 4;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                byte_len,
            });
            offset += byte_len;
        }
        let header = Header {
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Data(format!("serialize header: {e}")))?;

        let mut out = Vec::with_capacity(12 + header_bytes.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, t) in &sorted {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("container: {msg}"));
        if bytes.len() < 12 {
            return Err(bad("truncated preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let header_len =
            u32::from_le_bytes(bytes[8..12].try_into().expect("sized slice")) as usize;
        if header_len > MAX_HEADER_LEN || bytes.len() < 12 + header_len {
            return Err(bad("header length out of bounds"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| bad(&format!("malformed header: {e}")))?;
        if header.version != VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[12 + header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut seen = std::collections::BTreeSet::new();
        for e in &header.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(bad(&format!("duplicate tensor '{}'", e.name)));
            }
            let n: usize = e.shape.iter().try_fold(1usize, |acc, &x| {
                acc.checked_mul(x)
            }).ok_or_else(|| bad("shape overflow"))?;
            if n.checked_mul(4) != Some(e.byte_len) {
                return Err(bad(&format!("tensor '{}' length mismatch", e.name)));
            }
            let end = e
                .offset
                .checked_add(e.byte_len)
                .ok_or_else(|| bad("offset overflow"))?;
            if end > payload.len() {
                return Err(bad(&format!("tensor '{}' exceeds payload", e.name)));
            }
            let data: Vec<f32> = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("sized chunk")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| bad(&format!("tensor '{}': {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }
}

/// Everything needed to score new data: configuration, schema, fitted
/// preprocessing statistics, and all trained tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub variant: EvatVariant,
    pub schema: FeatureSchema,
    pub summarization: SummarizationConfig,
    pub normalizer: Normalizer,
    pub impute: bool,
    pub seed: u64,
    pub params: ParamSet<f32>,
    /// Free-form training metadata (best epoch, validation score, …).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    loss: LossConfig,
    variant: EvatVariant,
    schema: FeatureSchema,
    summarization: SummarizationConfig,
    normalizer: Normalizer,
    impute: bool,
    seed: u64,
    extra: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            model: self.model,
            loss: self.loss,
            variant: self.variant,
            schema: self.schema.clone(),
            summarization: self.summarization,
            normalizer: self.normalizer.clone(),
            impute: self.impute,
            seed: self.seed,
            extra: self.extra.clone(),
        };
        let container = Container {
            kind: "model".into(),
            meta: serde_json::to_value(&meta)
                .map_err(|e| Error::Data(format!("serialize checkpoint meta: {e}")))?,
            tensors: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        container.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let container = Container::from_bytes(bytes)?;
        if container.kind != "model" {
            return Err(Error::Data(format!(
                "expected a model checkpoint, found kind '{}'",
                container.kind
            )));
        }
        let meta: CheckpointMeta = serde_json::from_value(container.meta.clone())
            .map_err(|e| Error::Data(format!("malformed checkpoint meta: {e}")))?;
        meta.model.validate()?;
        meta.loss.validate()?;
        meta.schema.validate()?;
        let mut params = ParamSet::new();
        for (name, t) in container.tensors {
            params.insert(name, t);
        }
        Ok(Self {
            model: meta.model,
            loss: meta.loss,
            variant: meta.variant,
            schema: meta.schema,
            summarization: meta.summarization,
            normalizer: meta.normalizer,
            impute: meta.impute,
            seed: meta.seed,
            params,
            extra: meta.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureDesc, FeatureKind};
    use crate::summarize::CategoricalAggregator;

    fn sample_checkpoint() -> Checkpoint {
        let schema = FeatureSchema::new(vec![FeatureDesc {
            name: "x".into(),
            kind: FeatureKind::Numerical,
            categories: None,
        }])
        .unwrap();
        let mut params = ParamSet::new();
        params.insert("b", Tensor::matrix(1, 2, vec![1.0f32, -2.0]).unwrap());
        params.insert("a", Tensor::matrix(2, 2, vec![0.1f32, 0.2, 0.3, 0.4]).unwrap());
        Checkpoint {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            variant: EvatVariant::Scane,
            schema,
            summarization: SummarizationConfig {
                window_len: 2.0,
                categorical: CategoricalAggregator::Mode,
            },
            normalizer: Normalizer {
                means: vec![0.0, 0.0],
                stds: vec![1.0, 1.0],
                modes: vec![0, 0],
                n_cols: 2,
            },
            impute: false,
            seed: 7,
            params,
            extra: serde_json::json!({"best_epoch": 5}),
        }
    }

    #[test]
    fn roundtrip_is_exact_and_deterministic() {
        let ck = sample_checkpoint();
        let a = ck.to_bytes().unwrap();
        let b = ck.to_bytes().unwrap();
        assert_eq!(a, b);
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn malformed_inputs_are_rejected_not_panicked() {
        let ck = sample_checkpoint();
        let good = ck.to_bytes().unwrap();

        assert!(Checkpoint::from_bytes(&[]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTMAGIC....").is_err());

        let mut bad_len = good.clone();
        bad_len[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bad_len).is_err());

        let mut truncated = good.clone();
        truncated.truncate(good.len() - 5);
        assert!(Checkpoint::from_bytes(&truncated).is_err());

        // Bit flips in the header must not panic.
        for i in (12..100.min(good.len())).step_by(7) {
            let mut corrupted = good.clone();
            corrupted[i] ^= 0xff;
            let _ = Checkpoint::from_bytes(&corrupted);
        }
    }
}
