//! Central finite-difference checks of the analytic gradients of the full
//! training objective.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{IdfTable, QAInstance};
use crate::embeddings::{shape_sequence, EmbeddingTable, PAD};
use crate::error::Result;
use crate::graph::BackwardFault;
use crate::net::{ConvLayerSpec, MatchNet, NetConfig, PoolSpec};
use crate::ops::{Mode, PoolWindow};
use crate::similarity::Measurement;
use crate::trainer::objective;

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradient entries are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;
const TINY_LAMBDA: f64 = 5e-4;
const TINY_CLIP: f64 = 1e-7;
const TINY_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub measurement: Measurement,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < GRADCHECK_TOLERANCE)
    }

    pub fn failures(&self) -> Vec<&GroupError> {
        self.groups.iter().filter(|g| g.max_rel_error >= GRADCHECK_TOLERANCE).collect()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Two narrow 3×3 conv layers over 7×7 maps with 5-dimensional embeddings;
/// the metric variant uses two modalities.
pub fn tiny_config(measurement: Measurement) -> NetConfig {
    NetConfig {
        measurement,
        modalities: if measurement == Measurement::Metric { 2 } else { 1 },
        embedding_dim: 5,
        question_len: 7,
        answer_len: 7,
        layers: vec![
            ConvLayerSpec {
                filters: 2,
                kernel_h: 3,
                kernel_w: 3,
                pool: PoolSpec::Window(PoolWindow::square(2, 1)),
            },
            ConvLayerSpec {
                filters: 2,
                kernel_h: 3,
                kernel_w: 3,
                pool: PoolSpec::Global,
            },
        ],
        dropout: 0.5,
    }
}

/// Random model and a small labelled batch over a 10-word vocabulary.
pub fn tiny_problem(cfg: &NetConfig, seed: u64) -> Result<(MatchNet, Vec<QAInstance>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let table = EmbeddingTable::random(words.clone(), cfg.embedding_dim, &mut rng)?;
    let mut model = MatchNet::new(cfg.clone(), table, rng.random())?;
    // Move metric biases and BN affine parameters off their initial values
    // so every group has a generic gradient.
    if let Some(m) = &mut model.params.metric {
        for v in m.bias.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    for b in &mut model.params.blocks {
        for v in b.gamma.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in b.beta.data_mut().iter_mut().chain(b.bias.data_mut()) {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    let idf = IdfTable::from_weights(Default::default(), 1);
    let sentence = |rng: &mut ChaCha8Rng, max: usize| -> Vec<String> {
        let len = rng.random_range(3..=max);
        (0..len).map(|_| words.choose(rng).expect("non-empty").clone()).collect()
    };
    let batch = (0..TINY_BATCH)
        .map(|i| {
            let q = sentence(&mut rng, cfg.question_len);
            let a = sentence(&mut rng, cfg.answer_len + 2);
            QAInstance {
                qid: "tiny".into(),
                candidate: i,
                question: shape_sequence(&q, cfg.question_len, &model.params.embeddings),
                answer: shape_sequence(&a, cfg.answer_len, &model.params.embeddings),
                label: (i % 2) as f64,
                features: crate::data::overlap_features(&q, &a, &idf).map(|f| f + 0.1 * i as f64),
            }
        })
        .collect();
    Ok((model, batch))
}

/// Compares analytic and central-difference gradients for every trainable
/// group of `model` on the train-mode objective over `batch`.
pub fn check_model(model: &MatchNet, batch: &[QAInstance], dropout_seed: u64, fault: Option<BackwardFault>) -> Result<Vec<GroupError>> {
    let refs: Vec<&QAInstance> = batch.iter().collect();
    let analytic = objective(model, &refs, Mode::Train, dropout_seed, TINY_LAMBDA, TINY_CLIP, fault)?.gradients()?;
    let loss_at = |m: &MatchNet| -> Result<f64> { Ok(objective(m, &refs, Mode::Train, dropout_seed, TINY_LAMBDA, TINY_CLIP, None)?.value()) };

    let names = model.params.trainable_names();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (gi, name) in names.iter().enumerate() {
        let len = analytic[gi].len();
        let width = if gi == 0 { model.config.embedding_dim } else { len };
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in 0..len {
            if gi == 0 && i / width == PAD {
                continue;
            }
            let original = probe.params.trainable()[gi].data()[i];
            probe.params.trainable_mut()[gi].data_mut()[i] = original + FD_STEP;
            let up = loss_at(&probe)?;
            probe.params.trainable_mut()[gi].data_mut()[i] = original - FD_STEP;
            let down = loss_at(&probe)?;
            probe.params.trainable_mut()[gi].data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[gi].data()[i], numeric));
            checked += 1;
        }
        out.push(GroupError {
            group: name.clone(),
            max_rel_error: worst,
            checked,
        });
    }
    Ok(out)
}

/// Finite-difference suite over the tiny configuration for all three measurements.
pub fn run_suite(seed: u64, fault: Option<BackwardFault>) -> Result<Vec<GradcheckReport>> {
    [Measurement::Euclidean, Measurement::Cosine, Measurement::Metric]
        .into_iter()
        .map(|measurement| {
            let cfg = tiny_config(measurement);
            let (model, batch) = tiny_problem(&cfg, seed)?;
            Ok(GradcheckReport {
                measurement,
                groups: check_model(&model, &batch, seed ^ 0x5eed, fault)?,
            })
        })
        .collect()
}
