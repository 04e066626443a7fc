//! Pairwise token similarity tensors.
//!
//! Given shaped question embeddings `q` (`L1 × d`) and answer embeddings `a`
//! (`L2 × d`), each measurement produces a `k × L1 × L2` tensor:
//!
//! * metric: `m[k, i, j] = q_iᵀ U_k a_j + B_k[i, j]`, one learnable bilinear
//!   form and bias map per modality,
//! * euclidean: `1 / (1 + ‖q_i − a_j‖)`,
//! * cosine: `q_i·a_j / (‖q_i‖ ‖a_j‖)`, zero when either norm is zero.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measurement {
    Euclidean,
    Cosine,
    Metric,
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measurement::Euclidean => "euclidean",
            Measurement::Cosine => "cosine",
            Measurement::Metric => "metric",
        })
    }
}

impl FromStr for Measurement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euc" | "euclidean" => Ok(Measurement::Euclidean),
            "cos" | "cosine" => Ok(Measurement::Cosine),
            "metric" => Ok(Measurement::Metric),
            other => Err(Error::Config(format!("unknown measurement `{other}`"))),
        }
    }
}

/// Standard deviation of the noise added to the identity when initializing `U_k`.
pub const METRIC_INIT_NOISE: f64 = 0.01;

/// Learnable metric: `U` is `k × d × d`, `bias` is `k × L1 × L2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricParams {
    pub u: Tensor,
    pub bias: Tensor,
}

impl MetricParams {
    pub fn new(u: Tensor, bias: Tensor) -> Result<Self> {
        let [k, d, d2] = *u.expect_rank("metric", 3)? else {
            unreachable!()
        };
        if d != d2 {
            return Err(Error::dim("metric", "U column axis", d, d2));
        }
        let [kb, _, _] = *bias.expect_rank("metric", 3)? else {
            unreachable!()
        };
        if kb != k {
            return Err(Error::dim("metric", "bias modality axis", k, kb));
        }
        Ok(Self { u, bias })
    }

    /// Identity plus small gaussian noise for every `U_k`, zero biases.
    pub fn init<R: Rng + ?Sized>(k: usize, dim: usize, l1: usize, l2: usize, rng: &mut R) -> Self {
        let mut u = Tensor::randn(&[k, dim, dim], METRIC_INIT_NOISE, rng);
        for m in 0..k {
            for i in 0..dim {
                u.data_mut()[(m * dim + i) * dim + i] += 1.0;
            }
        }
        Self {
            u,
            bias: Tensor::zeros(&[k, l1, l2]),
        }
    }

    pub fn modalities(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.u.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    pub values: Tensor,
    pub measurement: Measurement,
}

fn pair_extents(op: &'static str, q: &Tensor, a: &Tensor) -> Result<(usize, usize, usize)> {
    let [l1, d] = *q.expect_rank(op, 2)? else {
        unreachable!()
    };
    let [l2, da] = *a.expect_rank(op, 2)? else {
        unreachable!()
    };
    if da != d {
        return Err(Error::dim(op, "embedding dimension", d, da));
    }
    Ok((l1, l2, d))
}

pub fn metric_similarity(q: &Tensor, a: &Tensor, params: &MetricParams) -> Result<SimilarityTensor> {
    let (l1, l2, d) = pair_extents("metric_similarity", q, a)?;
    if params.dim() != d {
        return Err(Error::dim("metric_similarity", "metric dimension", params.dim(), d));
    }
    let k = params.modalities();
    if params.bias.shape() != [k, l1, l2] {
        return Err(Error::dim("metric_similarity", "bias map", k * l1 * l2, params.bias.len()));
    }
    let mut out = params.bias.data().to_vec();
    let mut qu = vec![0.0; l1 * d];
    for m in 0..k {
        let um = &params.u.data()[m * d * d..(m + 1) * d * d];
        gemm(l1, d, d, q.data(), false, um, false, &mut qu, false);
        gemm(l1, d, l2, &qu, false, a.data(), true, &mut out[m * l1 * l2..(m + 1) * l1 * l2], true);
    }
    Ok(SimilarityTensor {
        values: Tensor::new(vec![k, l1, l2], out)?,
        measurement: Measurement::Metric,
    })
}

pub struct MetricGrads {
    pub q: Tensor,
    pub a: Tensor,
    pub u: Tensor,
    pub bias: Tensor,
}

pub fn metric_similarity_backward(q: &Tensor, a: &Tensor, u: &Tensor, grad: &Tensor) -> Result<MetricGrads> {
    let (l1, l2, d) = pair_extents("metric_similarity_backward", q, a)?;
    let k = u.shape()[0];
    if grad.shape() != [k, l1, l2] {
        return Err(Error::dim("metric_similarity_backward", "output gradient", k * l1 * l2, grad.len()));
    }
    let mut dq = vec![0.0; l1 * d];
    let mut da = vec![0.0; l2 * d];
    let mut du = vec![0.0; k * d * d];
    let mut qu = vec![0.0; l1 * d];
    let mut ga = vec![0.0; l1 * d];
    for m in 0..k {
        let um = &u.data()[m * d * d..(m + 1) * d * d];
        let gm = &grad.data()[m * l1 * l2..(m + 1) * l1 * l2];
        gemm(l1, d, d, q.data(), false, um, false, &mut qu, false);
        // ga = G · a  (L1 × d)
        gemm(l1, l2, d, gm, false, a.data(), false, &mut ga, false);
        // dq += ga · Uᵀ
        gemm(l1, d, d, &ga, false, um, true, &mut dq, true);
        // da += Gᵀ · (q U)
        gemm(l2, l1, d, gm, true, &qu, false, &mut da, true);
        // dU = qᵀ · ga
        gemm(d, l1, d, q.data(), true, &ga, false, &mut du[m * d * d..(m + 1) * d * d], false);
    }
    Ok(MetricGrads {
        q: Tensor::new(vec![l1, d], dq)?,
        a: Tensor::new(vec![l2, d], da)?,
        u: Tensor::new(vec![k, d, d], du)?,
        bias: grad.clone(),
    })
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn euclidean_similarity(q: &Tensor, a: &Tensor) -> Result<SimilarityTensor> {
    let (l1, l2, d) = pair_extents("euclidean_similarity", q, a)?;
    let mut out = Vec::with_capacity(l1 * l2);
    for qi in q.data().chunks(d) {
        for aj in a.data().chunks(d) {
            out.push(1.0 / (1.0 + dist(qi, aj)));
        }
    }
    Ok(SimilarityTensor {
        values: Tensor::new(vec![1, l1, l2], out)?,
        measurement: Measurement::Euclidean,
    })
}

/// Gradients w.r.t. `q` and `a`. At zero distance the (sub)gradient is taken as zero.
pub fn euclidean_similarity_backward(q: &Tensor, a: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (l1, l2, d) = pair_extents("euclidean_similarity_backward", q, a)?;
    if grad.len() != l1 * l2 {
        return Err(Error::dim("euclidean_similarity_backward", "output gradient", l1 * l2, grad.len()));
    }
    let mut dq = vec![0.0; l1 * d];
    let mut da = vec![0.0; l2 * d];
    for (i, qi) in q.data().chunks(d).enumerate() {
        for (j, aj) in a.data().chunks(d).enumerate() {
            let r = dist(qi, aj);
            if r == 0.0 {
                continue;
            }
            let s = 1.0 / (1.0 + r);
            // d s / d q_i = −s² (q_i − a_j) / r
            let coef = -grad.data()[i * l2 + j] * s * s / r;
            for t in 0..d {
                let diff = coef * (qi[t] - aj[t]);
                dq[i * d + t] += diff;
                da[j * d + t] -= diff;
            }
        }
    }
    Ok((Tensor::new(vec![l1, d], dq)?, Tensor::new(vec![l2, d], da)?))
}

pub fn cosine_similarity(q: &Tensor, a: &Tensor) -> Result<SimilarityTensor> {
    let (l1, l2, d) = pair_extents("cosine_similarity", q, a)?;
    let a_norms: Vec<f64> = a.data().chunks(d).map(|v| dot(v, v).sqrt()).collect();
    let mut out = Vec::with_capacity(l1 * l2);
    for qi in q.data().chunks(d) {
        let nq = dot(qi, qi).sqrt();
        for (aj, &na) in a.data().chunks(d).zip(&a_norms) {
            out.push(if nq == 0.0 || na == 0.0 { 0.0 } else { dot(qi, aj) / (nq * na) });
        }
    }
    Ok(SimilarityTensor {
        values: Tensor::new(vec![1, l1, l2], out)?,
        measurement: Measurement::Cosine,
    })
}

/// Gradients w.r.t. `q` and `a`; pairs involving a zero-norm vector contribute nothing.
pub fn cosine_similarity_backward(q: &Tensor, a: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (l1, l2, d) = pair_extents("cosine_similarity_backward", q, a)?;
    if grad.len() != l1 * l2 {
        return Err(Error::dim("cosine_similarity_backward", "output gradient", l1 * l2, grad.len()));
    }
    let a_norms: Vec<f64> = a.data().chunks(d).map(|v| dot(v, v).sqrt()).collect();
    let mut dq = vec![0.0; l1 * d];
    let mut da = vec![0.0; l2 * d];
    for (i, qi) in q.data().chunks(d).enumerate() {
        let nq = dot(qi, qi).sqrt();
        if nq == 0.0 {
            continue;
        }
        for (j, (aj, &na)) in a.data().chunks(d).zip(&a_norms).enumerate() {
            if na == 0.0 {
                continue;
            }
            let g = grad.data()[i * l2 + j];
            let m = dot(qi, aj) / (nq * na);
            for t in 0..d {
                dq[i * d + t] += g * (aj[t] / (nq * na) - m * qi[t] / (nq * nq));
                da[j * d + t] += g * (qi[t] / (nq * na) - m * aj[t] / (na * na));
            }
        }
    }
    Ok((Tensor::new(vec![l1, d], dq)?, Tensor::new(vec![l2, d], da)?))
}

/// `(λ/2) Σ_k ‖U_k‖²_F`.
pub fn frobenius_penalty(params: &MetricParams, lambda: f64) -> Result<f64> {
    frobenius_penalty_of(&params.u, lambda)
}

pub(crate) fn frobenius_penalty_of(u: &Tensor, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(0.5 * lambda * u.sum_sq())
}

/// Gradient of the penalty: `λ · U_k` for every modality.
pub fn frobenius_penalty_grad(params: &MetricParams, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    Ok(params.u.map(|x| lambda * x))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Config(format!("regularization weight must be finite and non-negative, got {lambda}")));
    }
    Ok(())
}
