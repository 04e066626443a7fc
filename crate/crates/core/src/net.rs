//! The matching network: similarity tensor → [conv → BN → tanh → avg-pool]
//! blocks → flatten → overlap features → affine → logistic probability.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{QAInstance, OVERLAP_FEATURES};
use crate::embeddings::{EmbeddingTable, PAD};
use crate::error::{Error, Result};
use crate::graph::{BackwardFault, ComputeGraph, NodeId};
use crate::ops::{BnMode, Mode, PoolWindow, RunningStats, BN_EPS};
use crate::similarity::{Measurement, MetricParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PoolSpec {
    Window(PoolWindow),
    /// Averages the whole map down to `1 × 1`.
    Global,
}

impl PoolSpec {
    fn window_for(&self, h: usize, w: usize) -> PoolWindow {
        match *self {
            PoolSpec::Window(win) => win,
            PoolSpec::Global => PoolWindow {
                height: h,
                width: w,
                stride_h: 1,
                stride_w: 1,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pool: PoolSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    Shallow,
    Deep,
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shallow" => Ok(Depth::Shallow),
            "deep" => Ok(Depth::Deep),
            other => Err(Error::Config(format!("unknown depth `{other}` (expected shallow or deep)"))),
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Depth::Shallow => "shallow",
            Depth::Deep => "deep",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub measurement: Measurement,
    pub modalities: usize,
    pub embedding_dim: usize,
    pub question_len: usize,
    pub answer_len: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub dropout: f64,
}

pub const DEFAULT_FIXED_LEN: usize = 40;
pub const DEFAULT_FILTERS: usize = 100;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_DROPOUT: f64 = 0.5;

impl NetConfig {
    /// Default geometry: 100 filters of 3×3 per layer; the deep variant pools
    /// 2×2/2 after the first layer, and the last layer always pools globally.
    pub fn standard(measurement: Measurement, modalities: usize, depth: Depth, embedding_dim: usize) -> Self {
        let conv = |pool| ConvLayerSpec {
            filters: DEFAULT_FILTERS,
            kernel_h: DEFAULT_KERNEL,
            kernel_w: DEFAULT_KERNEL,
            pool,
        };
        let layers = match depth {
            Depth::Shallow => vec![conv(PoolSpec::Global)],
            Depth::Deep => vec![conv(PoolSpec::Window(PoolWindow::square(2, 2))), conv(PoolSpec::Global)],
        };
        Self {
            measurement,
            modalities,
            embedding_dim,
            question_len: DEFAULT_FIXED_LEN,
            answer_len: DEFAULT_FIXED_LEN,
            layers,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn depth(&self) -> Option<Depth> {
        match self.layers.len() {
            1 => Some(Depth::Shallow),
            2 => Some(Depth::Deep),
            _ => None,
        }
    }

    /// Input channels of the first convolution.
    pub fn channels(&self) -> usize {
        match self.measurement {
            Measurement::Metric => self.modalities,
            _ => 1,
        }
    }

    /// Checks the layer chain and returns the flattened conv feature count.
    pub fn validate(&self) -> Result<usize> {
        if self.embedding_dim == 0 || self.question_len == 0 || self.answer_len == 0 {
            return Err(Error::Config("embedding dimension and fixed lengths must be positive".into()));
        }
        if self.modalities == 0 {
            return Err(Error::Config("modality count must be at least 1".into()));
        }
        if self.measurement != Measurement::Metric && self.modalities != 1 {
            return Err(Error::Config(format!("{} similarity has exactly one modality, got k = {}", self.measurement, self.modalities)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("at least one convolution layer is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        let (mut c, mut h, mut w) = (self.channels(), self.question_len, self.answer_len);
        for (i, l) in self.layers.iter().enumerate() {
            if l.filters == 0 || l.kernel_h == 0 || l.kernel_w == 0 {
                return Err(Error::Config(format!("layer {}: filters and kernel extents must be positive", i + 1)));
            }
            if l.kernel_h > h || l.kernel_w > w {
                return Err(Error::Config(format!(
                    "layer {}: kernel {}x{} exceeds its {h}x{w} input",
                    i + 1,
                    l.kernel_h,
                    l.kernel_w
                )));
            }
            h = h - l.kernel_h + 1;
            w = w - l.kernel_w + 1;
            let (ph, pw) = l
                .pool
                .window_for(h, w)
                .output_extent(h, w)
                .map_err(|e| Error::Config(format!("layer {}: {e}", i + 1)))?;
            (c, h, w) = (l.filters, ph, pw);
        }
        Ok(c * h * w)
    }

    /// Width of the head input: conv features plus overlap features.
    pub fn head_inputs(&self) -> Result<usize> {
        Ok(self.validate()? + OVERLAP_FEATURES)
    }
}

/// Parameters of one conv block (convolution, batch norm).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub filters: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embeddings: EmbeddingTable,
    pub metric: Option<MetricParams>,
    pub blocks: Vec<ConvBlock>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, limit, rng)
}

impl ModelParams {
    pub fn init(cfg: &NetConfig, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        let head_inputs = cfg.head_inputs()?;
        if embeddings.dim() != cfg.embedding_dim {
            return Err(Error::Config(format!(
                "embedding table has dimension {}, config expects {}",
                embeddings.dim(),
                cfg.embedding_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let metric = (cfg.measurement == Measurement::Metric)
            .then(|| MetricParams::init(cfg.modalities, cfg.embedding_dim, cfg.question_len, cfg.answer_len, &mut rng));
        let mut channels = cfg.channels();
        let mut blocks = Vec::with_capacity(cfg.layers.len());
        for l in &cfg.layers {
            let area = l.kernel_h * l.kernel_w;
            blocks.push(ConvBlock {
                filters: glorot(&[l.filters, channels, l.kernel_h, l.kernel_w], channels * area, l.filters * area, &mut rng),
                bias: Tensor::zeros(&[l.filters]),
                gamma: Tensor::ones(&[l.filters]),
                beta: Tensor::zeros(&[l.filters]),
                running: RunningStats::new(l.filters),
            });
            channels = l.filters;
        }
        Ok(Self {
            embeddings,
            metric,
            blocks,
            head_weight: glorot(&[1, head_inputs], head_inputs, 1, &mut rng),
            head_bias: Tensor::zeros(&[1]),
        })
    }

    /// Names of the trainable tensors, in the canonical order used by
    /// [`ModelParams::trainable`], optimizers and checkpoints.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = vec!["embeddings".to_string()];
        if self.metric.is_some() {
            names.push("metric.u".into());
            names.push("metric.bias".into());
        }
        for i in 0..self.blocks.len() {
            names.push(format!("conv{}.filters", i + 1));
            names.push(format!("conv{}.bias", i + 1));
            names.push(format!("bn{}.gamma", i + 1));
            names.push(format!("bn{}.beta", i + 1));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = vec![self.embeddings.vectors()];
        if let Some(m) = &self.metric {
            out.push(&m.u);
            out.push(&m.bias);
        }
        for b in &self.blocks {
            out.extend([&b.filters, &b.bias, &b.gamma, &b.beta]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![self.embeddings.vectors_mut()];
        if let Some(m) = &mut self.metric {
            out.push(&mut m.u);
            out.push(&mut m.bias);
        }
        for b in &mut self.blocks {
            out.extend([&mut b.filters, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.trainable().iter().all(|t| t.all_finite())
            && self.blocks.iter().all(|b| b.running.mean.all_finite() && b.running.var.all_finite())
    }
}

/// A recorded forward pass over one batch.
pub struct BatchForward {
    pub graph: ComputeGraph,
    /// `B × 1` output probabilities.
    pub probs: NodeId,
    /// Leaf nodes of the trainable tensors, canonical order.
    pub params: Vec<NodeId>,
    /// Batch-norm node per conv block.
    pub bn_nodes: Vec<NodeId>,
}

impl BatchForward {
    pub fn probabilities(&self) -> Vec<f64> {
        self.graph.value(self.probs).data().to_vec()
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchNet {
    pub config: NetConfig,
    pub params: ModelParams,
}

const SCORE_CHUNK: usize = 64;

impl MatchNet {
    pub fn new(config: NetConfig, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, embeddings, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetConfig, params: ModelParams) -> Result<Self> {
        let net = Self { config, params };
        net.check_consistency()?;
        Ok(net)
    }

    /// Verifies every parameter shape against the configuration.
    pub fn check_consistency(&self) -> Result<()> {
        let reference = ModelParams::init(&self.config, self.params.embeddings.clone(), 0)?;
        if reference.metric.is_some() != self.params.metric.is_some() || reference.blocks.len() != self.params.blocks.len() {
            return Err(Error::Config("parameter layout does not match the network configuration".into()));
        }
        for ((name, want), got) in reference
            .trainable_names()
            .iter()
            .zip(reference.trainable())
            .zip(self.params.trainable())
        {
            if want.shape() != got.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, configuration implies {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        for (i, (a, b)) in reference.blocks.iter().zip(&self.params.blocks).enumerate() {
            if a.running.mean.shape() != b.running.mean.shape() || a.running.var.shape() != b.running.var.shape() {
                return Err(Error::Config(format!("running statistics of block {} do not match the configuration", i + 1)));
            }
        }
        Ok(())
    }

    /// Records the forward pass for `batch`.
    pub fn forward_batch(&self, batch: &[&QAInstance], mode: Mode, dropout_seed: u64, fault: Option<BackwardFault>) -> Result<BatchForward> {
        let cfg = &self.config;
        let p = &self.params;
        if batch.is_empty() {
            return Err(Error::DegenerateInput {
                op: "forward",
                reason: "empty batch".into(),
            });
        }
        let mut g = ComputeGraph::with_fault(fault);
        let params: Vec<NodeId> = p.trainable().into_iter().map(|t| g.leaf(t.clone())).collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("canonical parameter order");
        let table = take();
        let metric = p.metric.as_ref().map(|_| (take(), take()));

        let b = batch.len();
        let mut qids = Vec::with_capacity(b * cfg.question_len);
        let mut aids = Vec::with_capacity(b * cfg.answer_len);
        let mut feats = Vec::with_capacity(b * OVERLAP_FEATURES);
        for inst in batch {
            if inst.question.ids.len() != cfg.question_len {
                return Err(Error::dim("forward", "question length", cfg.question_len, inst.question.ids.len()));
            }
            if inst.answer.ids.len() != cfg.answer_len {
                return Err(Error::dim("forward", "answer length", cfg.answer_len, inst.answer.ids.len()));
            }
            qids.extend_from_slice(&inst.question.ids);
            aids.extend_from_slice(&inst.answer.ids);
            feats.extend_from_slice(&inst.features);
        }
        let q = g.embed(table, &qids, b, Some(PAD))?;
        let a = g.embed(table, &aids, b, Some(PAD))?;
        let mut x = g.similarity(cfg.measurement, q, a, metric)?;

        let mut bn_nodes = Vec::with_capacity(p.blocks.len());
        for (i, (spec, block)) in cfg.layers.iter().zip(&p.blocks).enumerate() {
            let (f, bias, gamma, beta) = (take(), take(), take(), take());
            x = g.conv2d(x, f, bias)?;
            let bn_mode = match mode {
                Mode::Train => BnMode::Train,
                Mode::Inference => BnMode::Inference(&block.running),
            };
            x = g.batch_norm(x, gamma, beta, BN_EPS, bn_mode)?;
            bn_nodes.push(x);
            x = g.tanh(x)?;
            let shape = g.value(x).shape();
            let window = spec.pool.window_for(shape[2], shape[3]);
            x = g.avg_pool(x, window)?;
            if i == 0 && mode == Mode::Train && cfg.dropout > 0.0 {
                x = g.dropout(x, cfg.dropout, dropout_seed)?;
            }
        }
        let flat = g.flatten(x)?;
        let feats = g.leaf(Tensor::new(vec![b, OVERLAP_FEATURES], feats)?);
        let joined = g.concat(flat, feats)?;
        let (hw, hb) = (take(), take());
        let logits = g.affine(joined, hw, hb)?;
        let probs = g.sigmoid(logits)?;
        Ok(BatchForward {
            graph: g,
            probs,
            params,
            bn_nodes,
        })
    }

    /// Probability that `instance`'s answer is correct.
    pub fn forward(&self, instance: &QAInstance, mode: Mode, dropout_seed: u64) -> Result<f64> {
        let fwd = self.forward_batch(&[instance], mode, dropout_seed, None)?;
        Ok(fwd.graph.value(fwd.probs).item())
    }

    /// Inference-mode probabilities, in input order.
    pub fn score_candidates(&self, instances: &[QAInstance]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(SCORE_CHUNK) {
            let refs: Vec<&QAInstance> = chunk.iter().collect();
            out.extend(self.forward_batch(&refs, Mode::Inference, 0, None)?.probabilities());
        }
        Ok(out)
    }
}
