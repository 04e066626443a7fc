//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use m2snet::net::{ConvLayerSpec, DEFAULT_DROPOUT, DEFAULT_FILTERS, DEFAULT_FIXED_LEN, DEFAULT_KERNEL};
use m2snet::trainer::TrainConfig;
use m2snet::{Depth, Measurement, NetConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Pre-trained vectors; random vectors over the data vocabulary when absent.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

fn default_dim() -> usize {
    m2snet::embeddings::DEFAULT_DIM
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub measurement: String,
    #[serde(default = "one")]
    pub k: usize,
    #[serde(default = "deep")]
    pub depth: String,
    #[serde(default = "filters")]
    pub filters: usize,
    #[serde(default = "kernel")]
    pub kernel: usize,
    #[serde(default = "dropout")]
    pub dropout: f64,
    #[serde(default = "fixed_len")]
    pub question_len: usize,
    #[serde(default = "fixed_len")]
    pub answer_len: usize,
}

fn one() -> usize {
    1
}
fn deep() -> String {
    "deep".into()
}
fn filters() -> usize {
    DEFAULT_FILTERS
}
fn kernel() -> usize {
    DEFAULT_KERNEL
}
fn dropout() -> f64 {
    DEFAULT_DROPOUT
}
fn fixed_len() -> usize {
    DEFAULT_FIXED_LEN
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, Failure> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Failure::usage(format!("invalid config: {e}")))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.train);
        resolve(&mut cfg.data.dev);
        cfg.data.test.as_mut().map(resolve);
        cfg.data.embeddings.as_mut().map(resolve);
        Ok(cfg)
    }

    pub fn net_config(&self) -> Result<NetConfig, Failure> {
        let m = &self.model;
        let measurement: Measurement = m.measurement.parse().map_err(Failure::from)?;
        let depth: Depth = m.depth.parse().map_err(Failure::from)?;
        if measurement == Measurement::Metric && ![1, 2, 4].contains(&m.k) {
            log::warn!("k = {} is outside the studied values 1, 2, 4", m.k);
        }
        let mut cfg = NetConfig::standard(measurement, m.k, depth, self.data.embedding_dim);
        cfg.question_len = m.question_len;
        cfg.answer_len = m.answer_len;
        cfg.dropout = m.dropout;
        cfg.layers = cfg
            .layers
            .iter()
            .map(|l| ConvLayerSpec {
                filters: m.filters,
                kernel_h: m.kernel,
                kernel_w: m.kernel,
                pool: l.pool,
            })
            .collect();
        cfg.validate().map_err(Failure::from)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[data]
train = "train.tsv"
dev = "/abs/dev.tsv"

[model]
measurement = "metric"
k = 4
depth = "deep"

[train]
seed = 7
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let cfg = RunConfig::parse(SAMPLE, Path::new("/base")).unwrap();
        assert_eq!(cfg.data.train, PathBuf::from("/base/train.tsv"));
        assert_eq!(cfg.data.dev, PathBuf::from("/abs/dev.tsv"));
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.patience, 5);
        let net = cfg.net_config().unwrap();
        assert_eq!(net.modalities, 4);
        assert_eq!(net.layers.len(), 2);
        assert_eq!(net.embedding_dim, 50);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let bad = SAMPLE.replace("seed = 7", "sede = 7");
        assert_eq!(RunConfig::parse(&bad, Path::new("/")).unwrap_err().code, 2);
        let bad = SAMPLE.replace("\"metric\"", "\"manhattan\"");
        let cfg = RunConfig::parse(&bad, Path::new("/")).unwrap();
        assert_eq!(cfg.net_config().unwrap_err().code, 2);
    }
}
