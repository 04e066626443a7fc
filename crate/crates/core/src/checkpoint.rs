//! Self-describing model checkpoints.
//!
//! Layout: a magic line, one line of JSON (configuration, vocabulary and its
//! hash, IDF tokens, tensor directory), then every tensor's values as
//! little-endian `f64` in directory order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::IdfTable;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::net::{ConvBlock, MatchNet, ModelParams, NetConfig};
use crate::ops::RunningStats;
use crate::similarity::MetricParams;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"M2SNET-CHECKPOINT v1\n";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    vocab_hash: String,
    vocab: Vec<String>,
    idf_documents: Option<usize>,
    idf_tokens: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A trained model together with the IDF table its features were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MatchNet,
    pub idf: Option<IdfTable>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    fn named_tensors(&self) -> (Vec<(String, Tensor)>, Vec<String>) {
        let p = &self.model.params;
        let mut out: Vec<(String, Tensor)> = p
            .trainable_names()
            .into_iter()
            .zip(p.trainable().into_iter().cloned())
            .collect();
        for (i, b) in p.blocks.iter().enumerate() {
            out.push((format!("bn{}.running_mean", i + 1), b.running.mean.clone()));
            out.push((format!("bn{}.running_var", i + 1), b.running.var.clone()));
        }
        let mut idf_tokens = Vec::new();
        if let Some(idf) = &self.idf {
            idf_tokens = idf.weights().keys().cloned().collect();
            idf_tokens.sort_unstable();
            if !idf_tokens.is_empty() {
                let w = idf_tokens.iter().map(|t| idf.weights()[t]).collect();
                out.push(("idf.weights".into(), Tensor::new(vec![idf_tokens.len()], w).expect("non-empty")));
            }
        }
        (out, idf_tokens)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (tensors, idf_tokens) = self.named_tensors();
        let header = Header {
            config: self.model.config.clone(),
            vocab_hash: self.model.params.embeddings.vocab_hash(),
            vocab: self.model.params.embeddings.tokens().to_vec(),
            idf_documents: self.idf.as_ref().map(IdfTable::documents),
            idf_tokens,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&header).map_err(|e| corrupt(e.to_string()))?;
        let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt("missing checkpoint magic line"))?;
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut payload = &rest[nl + 1..];

        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(corrupt(format!("payload truncated in tensor `{}`", entry.name)));
            }
            let (chunk, tail) = payload.split_at(n * 8);
            payload = tail;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| corrupt(format!("tensor `{}`: {e}", entry.name)))?;
            if !t.all_finite() {
                return Err(corrupt(format!("tensor `{}` has non-finite values", entry.name)));
            }
            tensors.insert(entry.name.clone(), t);
        }
        if !payload.is_empty() {
            return Err(corrupt(format!("{} trailing bytes after the last tensor", payload.len())));
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")));

        let embeddings = EmbeddingTable::from_parts(header.vocab, take("embeddings")?).map_err(|e| corrupt(e.to_string()))?;
        if embeddings.vocab_hash() != header.vocab_hash {
            return Err(corrupt("vocabulary hash mismatch"));
        }
        let metric = if header.tensors.iter().any(|t| t.name == "metric.u") {
            Some(MetricParams::new(take("metric.u")?, take("metric.bias")?).map_err(|e| corrupt(e.to_string()))?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(header.config.layers.len());
        for i in 1..=header.config.layers.len() {
            let mean = take(&format!("bn{i}.running_mean"))?;
            let mut running = RunningStats::new(mean.len());
            running.mean = mean;
            running.var = take(&format!("bn{i}.running_var"))?;
            blocks.push(ConvBlock {
                filters: take(&format!("conv{i}.filters"))?,
                bias: take(&format!("conv{i}.bias"))?,
                gamma: take(&format!("bn{i}.gamma"))?,
                beta: take(&format!("bn{i}.beta"))?,
                running,
            });
        }
        let params = ModelParams {
            embeddings,
            metric,
            blocks,
            head_weight: take("head.weight")?,
            head_bias: take("head.bias")?,
        };
        let idf = match header.idf_documents {
            None => None,
            Some(docs) => {
                let weights = if header.idf_tokens.is_empty() {
                    HashMap::new()
                } else {
                    let w = take("idf.weights")?;
                    if w.len() != header.idf_tokens.len() {
                        return Err(corrupt("IDF token and weight counts differ"));
                    }
                    header.idf_tokens.into_iter().zip(w.data().iter().copied()).collect()
                };
                Some(IdfTable::from_weights(weights, docs))
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor `{extra}`")));
        }
        let model = MatchNet::from_parts(header.config, params).map_err(|e| corrupt(e.to_string()))?;
        Ok(Self { model, idf })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
