//! Pointwise rank training: cross-entropy with a Frobenius penalty on the
//! metric, AdaDelta updates and early stopping on dev MAP.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, EncodedQuestion, QAInstance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, RankedQuestion, RankedRun};
use crate::graph::{cross_entropy_grad, cross_entropy_value, BackwardFault, NodeId};
use crate::net::{BatchForward, MatchNet};
use crate::ops::Mode;
use crate::similarity::{frobenius_penalty, MetricParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    pub prob_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            batch_size: 50,
            max_epochs: 50,
            patience: 5,
            rho: 0.95,
            eps: 1e-6,
            seed: 1234,
            prob_clip: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) || self.eps <= 0.0 {
            return Err(Error::Config("AdaDelta needs 0 < rho < 1 and eps > 0".into()));
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return Err(Error::Config("probability clip must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// `−(1/N) Σ [y log p + (1−y) log(1−p)] + (λ/2) Σ_k ‖U_k‖²_F`, with `p`
/// clipped to `[clip, 1 − clip]`. Without a metric the penalty is zero.
pub fn cross_entropy_loss(probs: &[f64], labels: &[f64], metric: Option<&MetricParams>, lambda: f64, clip: f64) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::dim("cross_entropy_loss", "label count", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(Error::DegenerateInput {
            op: "cross_entropy_loss",
            reason: "empty batch".into(),
        });
    }
    let penalty = match metric {
        Some(m) => frobenius_penalty(m, lambda)?,
        None => 0.0,
    };
    Ok(cross_entropy_value(probs, labels, clip) + penalty)
}

/// `dL/dp_i` of the data term.
pub fn cross_entropy_prob_grad(probs: &[f64], labels: &[f64], clip: f64) -> Vec<f64> {
    cross_entropy_grad(probs, labels, clip)
}

/// Decayed accumulators `E[g²]` and `E[Δx²]`, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: Vec<Tensor>,
    pub sq_update: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        Self {
            sq_grad: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            sq_update: params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
}

impl AdaDelta {
    /// One update of every parameter. Fails before touching anything if a
    /// gradient is non-finite, naming the parameter.
    pub fn step(&self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String], state: &mut OptimizerState) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.sq_grad.len() {
            return Err(Error::dim("adadelta_step", "parameter count", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            if p.shape() != g.shape() || state.sq_grad[i].shape() != g.shape() {
                return Err(Error::dim("adadelta_step", format!("shape of `{name}`"), p.len(), g.len()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { param: name });
            }
        }
        let (rho, eps) = (self.rho, self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let eg = state.sq_grad[i].data_mut();
            let ex = state.sq_update[i].data_mut();
            for (((x, &g), eg), ex) in p.data_mut().iter_mut().zip(g.data()).zip(eg.iter_mut()).zip(ex.iter_mut()) {
                *eg = rho * *eg + (1.0 - rho) * g * g;
                let dx = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * g;
                *ex = rho * *ex + (1.0 - rho) * dx * dx;
                *x += dx;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best monitored value; stops after `patience` epochs without a
/// strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if value <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, value));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_map: f64,
    pub dev_mrr: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch<TAB>train loss<TAB>dev MAP<TAB>dev MRR<TAB>seconds`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.2}",
            self.epoch, self.train_loss, self.dev_map, self.dev_mrr, self.seconds
        )
    }

    /// Every field except wall-clock time, bit for bit.
    pub fn deterministic_key(&self) -> (usize, u64, u64, u64) {
        (self.epoch, self.train_loss.to_bits(), self.dev_map.to_bits(), self.dev_mrr.to_bits())
    }
}

pub struct TrainOutcome {
    pub best: MatchNet,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// SplitMix64 finalizer, used to derive per-epoch and per-batch seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A forward pass with its objective node attached.
pub struct Objective {
    pub forward: BatchForward,
    pub loss: NodeId,
}

impl Objective {
    pub fn value(&self) -> f64 {
        self.forward.graph.value(self.loss).item()
    }

    /// Gradients of the objective for every trainable tensor, canonical order.
    pub fn gradients(&self) -> Result<Vec<Tensor>> {
        let mut grads = self.forward.graph.backward(self.loss)?;
        Ok(self.forward.params.iter().map(|&id| grads.take(id)).collect())
    }
}

/// Records the full objective (data term + metric penalty) over `batch`.
pub fn objective(
    model: &MatchNet,
    batch: &[&QAInstance],
    mode: Mode,
    dropout_seed: u64,
    lambda: f64,
    clip: f64,
    fault: Option<BackwardFault>,
) -> Result<Objective> {
    let mut forward = model.forward_batch(batch, mode, dropout_seed, fault)?;
    let labels: Vec<f64> = batch.iter().map(|i| i.label).collect();
    let g = &mut forward.graph;
    let data = g.cross_entropy(forward.probs, &labels, clip)?;
    let loss = if model.params.metric.is_some() {
        let u = forward.params[1];
        let penalty = g.frobenius(u, lambda)?;
        g.add(data, penalty)?
    } else {
        data
    };
    Ok(Objective { forward, loss })
}

/// Inference-mode objective over a whole instance set.
pub fn dataset_loss(model: &MatchNet, instances: &[QAInstance], lambda: f64, clip: f64) -> Result<f64> {
    let probs = model.score_candidates(instances)?;
    let labels: Vec<f64> = instances.iter().map(|i| i.label).collect();
    cross_entropy_loss(&probs, &labels, model.params.metric.as_ref(), lambda, clip)
}

/// Scores every question and evaluates MAP/MRR.
pub fn evaluate_questions(model: &MatchNet, questions: &[EncodedQuestion], run_id: &str) -> Result<(RankedRun, EvalReport)> {
    let flat: Vec<QAInstance> = questions.iter().flat_map(|q| q.instances.iter().cloned()).collect();
    let scores = model.score_candidates(&flat)?;
    let mut offset = 0;
    let ranked = questions
        .iter()
        .map(|q| {
            let n = q.instances.len();
            let labels: Vec<bool> = q.instances.iter().map(|i| i.label > 0.5).collect();
            let rq = RankedQuestion::from_scores(q.qid.clone(), &scores[offset..offset + n], &labels);
            offset += n;
            rq
        })
        .collect();
    let run = RankedRun {
        run_id: run_id.to_string(),
        questions: ranked,
    };
    let report = evaluate(&run)?;
    Ok((run, report))
}

/// Runs one optimization step on `batch`, returning its objective value.
pub fn train_step(
    model: &mut MatchNet,
    state: &mut OptimizerState,
    batch: &[&QAInstance],
    dropout_seed: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let obj = objective(model, batch, Mode::Train, dropout_seed, cfg.lambda, cfg.prob_clip, None)?;
    let value = obj.value();
    let grads = obj.gradients()?;
    let stats: Vec<(Vec<f64>, Vec<f64>)> = obj
        .forward
        .bn_nodes
        .iter()
        .map(|&n| {
            let (m, v) = obj.forward.graph.batch_norm_stats(n).expect("train-mode batch norm");
            (m.to_vec(), v.to_vec())
        })
        .collect();
    drop(obj);

    let names = model.params.trainable_names();
    let opt = AdaDelta { rho: cfg.rho, eps: cfg.eps };
    opt.step(&mut model.params.trainable_mut(), &grads, &names, state)?;
    model.params.embeddings.zero_pad();
    for (block, (m, v)) in model.params.blocks.iter_mut().zip(&stats) {
        block.running.update(m, v);
    }
    if !model.params.all_finite() {
        return Err(Error::NonFinite {
            param: "parameters after update".into(),
        });
    }
    Ok(value)
}

/// Trains `model` on `train`, monitoring MAP on `dev`; returns the best epoch's model.
pub fn train(
    mut model: MatchNet,
    train: &[QAInstance],
    dev: &[EncodedQuestion],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dev.is_empty() || dev.iter().all(|q| q.instances.is_empty()) {
        return Err(Error::Config("dev split is empty".into()));
    }
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "training set has {} instances, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut state = OptimizerState::zeros_like(&model.params.trainable());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let batches = make_batches(train.len(), cfg.batch_size, mix_seed(cfg.seed, epoch as u64, 0), Mode::Train)?;
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch: Vec<&QAInstance> = idx.iter().map(|&i| &train[i]).collect();
            total += train_step(&mut model, &mut state, &batch, mix_seed(cfg.seed, epoch as u64, bi as u64 + 1), cfg)?;
        }
        let (_, report) = evaluate_questions(&model, dev, "dev")?;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            dev_map: report.map,
            dev_mrr: report.mrr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
        match stopper.observe(epoch, report.map) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let best_epoch = stopper.best().map(|(e, _)| e).unwrap_or(0);
    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
        stopped_early,
    })
}
