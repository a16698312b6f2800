use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, Vocabulary};
use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::io::{read_string, write_string};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "vibre-checkpoint";

/// A tensor with its shape header and little-endian `f64` payload in base64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

pub fn encode_tensor(name: &str, t: &Tensor) -> StoredTensor {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    StoredTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: STANDARD.encode(bytes),
    }
}

pub fn decode_tensor(s: &StoredTensor) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&s.data)
        .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", s.name)))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("tensor {}: truncated payload", s.name)));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(s.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", s.name)))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    format: String,
    version: u32,
    method: String,
    data_digest: Option<String>,
    has_vib: bool,
    config: ModelConfig,
    labels: LabelSet,
    vocab: Vocabulary,
    tensors: Vec<StoredTensor>,
}

/// A trained model plus the method that produced it and the digest of the
/// data manifest it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub method: String,
    pub data_digest: Option<String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let s = &self.state;
        let file = File {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            method: self.method.clone(),
            data_digest: self.data_digest.clone(),
            has_vib: s.has_vib(),
            config: s.config.clone(),
            labels: s.labels.clone(),
            vocab: s.vocab.clone(),
            tensors: s.params.named().into_iter().map(|(n, t)| encode_tensor(&n, t)).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: File = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format '{}')", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let mut state = ModelState::init(file.config, file.vocab, file.labels, file.has_vib)?;
        let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
        for t in &file.tensors {
            stored.insert(t.name.clone(), decode_tensor(t)?);
        }
        let mut problem = None;
        state.params.for_each_mut(&mut |name, slot| match stored.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                problem.get_or_insert(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("tensor {name} missing"));
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        state.check_finite()?;
        Ok(Self {
            state,
            method: file.method,
            data_digest: file.data_digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_string(path)?)
    }
}
