//! Reverse-mode differentiation over a tape of batched tensor operations.
//!
//! Operations evaluate eagerly when recorded; [`ComputeGraph::backward`]
//! replays the tape in reverse and accumulates vector-Jacobian products.
//! Every non-leaf operation carries a leading batch axis `B`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::{self, BnCache, BnMode, PoolWindow};
use crate::similarity::{self, Measurement};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, for exercising the gradient checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Conv filter gradients are scaled by 1.01.
    Conv2dFilters,
    /// Metric `U` gradients are scaled by 1.01.
    MetricU,
}

enum Op {
    Leaf,
    Embed {
        table: NodeId,
        ids: Vec<usize>,
        frozen_row: Option<usize>,
    },
    Similarity {
        measurement: Measurement,
        q: NodeId,
        a: NodeId,
        metric: Option<(NodeId, NodeId)>,
    },
    Conv2d {
        x: NodeId,
        filters: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BnCache,
    },
    Tanh {
        x: NodeId,
    },
    AvgPool {
        x: NodeId,
        window: PoolWindow,
    },
    Dropout {
        x: NodeId,
        multipliers: Vec<f64>,
    },
    Flatten {
        x: NodeId,
    },
    Concat {
        left: NodeId,
        right: NodeId,
    },
    Affine {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    CrossEntropy {
        probs: NodeId,
        labels: Vec<f64>,
        clip: f64,
    },
    Frobenius {
        u: NodeId,
        lambda: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

/// Gradients of a scalar with respect to every node of the graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; nodes that do not influence the loss get zeros.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn batch_of(op: &'static str, t: &Tensor, rank: usize) -> Result<usize> {
    Ok(t.expect_rank(op, rank)?[0])
}

fn stack_results(op: &'static str, items: Vec<Result<Tensor>>) -> Result<Tensor> {
    let items = items.into_iter().collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::DegenerateInput {
            op,
            reason: "empty batch".into(),
        });
    }
    Tensor::stack(&items)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probabilities clipped to `[clip, 1 − clip]`.
pub(crate) fn cross_entropy_value(probs: &[f64], labels: &[f64], clip: f64) -> f64 {
    let n = probs.len() as f64;
    -probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(clip, 1.0 - clip);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

/// `dL/dp_i = (p_i − y_i) / (N p_i (1 − p_i))`, zero where clipping is active.
pub(crate) fn cross_entropy_grad(probs: &[f64], labels: &[f64], clip: f64) -> Vec<f64> {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p < clip || p > 1.0 - clip {
                0.0
            } else {
                (p - y) / (n * p * (1.0 - p))
            }
        })
        .collect()
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                param: format!("forward output of node {}", self.nodes.len()),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    /// Row lookup: `ids` (length `B·len`) index rows of a `V × d` table,
    /// producing `B × len × d`. `frozen_row` never receives gradient.
    pub fn embed(&mut self, table: NodeId, ids: &[usize], batch: usize, frozen_row: Option<usize>) -> Result<NodeId> {
        let t = self.value(table);
        let [v, d] = *t.expect_rank("embed", 2)? else {
            unreachable!()
        };
        if batch == 0 || !ids.len().is_multiple_of(batch) {
            return Err(Error::dim("embed", "id count", batch, ids.len()));
        }
        let len = ids.len() / batch;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::dim("embed", "vocabulary index", v, id));
            }
            out.extend_from_slice(t.outer(id));
        }
        let value = Tensor::new(vec![batch, len, d], out)?;
        self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                frozen_row,
            },
        )
    }

    /// `B × L1 × d` and `B × L2 × d` → `B × k × L1 × L2`.
    pub fn similarity(&mut self, measurement: Measurement, q: NodeId, a: NodeId, metric: Option<(NodeId, NodeId)>) -> Result<NodeId> {
        let qv = self.value(q);
        let av = self.value(a);
        let b = batch_of("similarity", qv, 3)?;
        let ba = batch_of("similarity", av, 3)?;
        if b != ba {
            return Err(Error::dim("similarity", "batch axis", b, ba));
        }
        let params = match (measurement, metric) {
            (Measurement::Metric, Some((u, bias))) => Some(similarity::MetricParams::new(self.value(u).clone(), self.value(bias).clone())?),
            (Measurement::Metric, None) => return Err(Error::Config("metric similarity needs U and bias nodes".into())),
            (_, Some(_)) => return Err(Error::Config(format!("{measurement} similarity takes no metric parameters"))),
            _ => None,
        };
        let items: Vec<Result<Tensor>> = (0..b)
            .map(|s| {
                let (qs, as_) = (qv.slice_outer(s), av.slice_outer(s));
                let st = match &params {
                    Some(p) => similarity::metric_similarity(&qs, &as_, p)?,
                    None if measurement == Measurement::Cosine => similarity::cosine_similarity(&qs, &as_)?,
                    None => similarity::euclidean_similarity(&qs, &as_)?,
                };
                Ok(st.values)
            })
            .collect();
        let value = stack_results("similarity", items)?;
        self.push(value, Op::Similarity { measurement, q, a, metric })
    }

    /// Batched narrow convolution: `B × c × H × W` → `B × n × H' × W'`.
    pub fn conv2d(&mut self, x: NodeId, filters: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let b = batch_of("conv2d", xv, 4)?;
        let (f, bs) = (self.value(filters), self.value(bias));
        let items: Vec<Result<Tensor>> = (0..b)
            .into_par_iter()
            .map(|s| ops::conv2d(&xv.slice_outer(s), f, bs))
            .collect();
        let value = stack_results("conv2d", items)?;
        self.push(value, Op::Conv2d { x, filters, bias })
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, mode: BnMode<'_>) -> Result<NodeId> {
        let (value, cache) = ops::batch_norm_stacked(self.value(x), self.value(gamma), self.value(beta), eps, mode)?;
        self.push(value, Op::BatchNorm { x, gamma, beta, cache })
    }

    /// Batch mean and variance recorded by a train-mode batch-norm node.
    pub fn batch_norm_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { cache, .. } if cache.train => Some((&cache.batch_mean, &cache.batch_var)),
            _ => None,
        }
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let value = ops::tanh_activation(self.value(x));
        self.push(value, Op::Tanh { x })
    }

    pub fn avg_pool(&mut self, x: NodeId, window: PoolWindow) -> Result<NodeId> {
        let xv = self.value(x);
        let b = batch_of("avg_pool2d", xv, 4)?;
        let items: Vec<Result<Tensor>> = (0..b).map(|s| ops::avg_pool2d(&xv.slice_outer(s), window)).collect();
        let value = stack_results("avg_pool2d", items)?;
        self.push(value, Op::AvgPool { x, window })
    }

    /// Inverted dropout with a fixed mask drawn from `seed`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        let xv = self.value(x);
        let multipliers = ops::dropout_multipliers(xv.len(), rate, seed)?;
        let data = xv.data().iter().zip(&multipliers).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x, multipliers })
    }

    /// `B × …` → `B × m`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let b = xv.shape()[0];
        let value = xv.clone().reshape(vec![b, xv.len() / b])?;
        self.push(value, Op::Flatten { x })
    }

    /// Column concatenation of `B × m` and `B × n`.
    pub fn concat(&mut self, left: NodeId, right: NodeId) -> Result<NodeId> {
        let (l, r) = (self.value(left), self.value(right));
        let [b, m] = *l.expect_rank("concat", 2)? else {
            unreachable!()
        };
        let [br, n] = *r.expect_rank("concat", 2)? else {
            unreachable!()
        };
        if b != br {
            return Err(Error::dim("concat", "batch axis", b, br));
        }
        let mut out = Vec::with_capacity(b * (m + n));
        for s in 0..b {
            out.extend_from_slice(l.outer(s));
            out.extend_from_slice(r.outer(s));
        }
        let value = Tensor::new(vec![b, m + n], out)?;
        self.push(value, Op::Concat { left, right })
    }

    /// `B × m` input, `p × m` weight, `p` bias → `B × p`.
    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, w, bv) = (self.value(x), self.value(weight), self.value(bias));
        let [b, m] = *xv.expect_rank("affine", 2)? else {
            unreachable!()
        };
        let [p, wm] = *w.expect_rank("affine", 2)? else {
            unreachable!()
        };
        if wm != m {
            return Err(Error::dim("affine", "inner dimension", wm, m));
        }
        if bv.shape() != [p] {
            return Err(Error::dim("affine", "bias length", p, bv.len()));
        }
        let mut out: Vec<f64> = (0..b).flat_map(|_| bv.data().iter().copied()).collect();
        ops::gemm(b, m, p, xv.data(), false, w.data(), true, &mut out, true);
        let value = Tensor::new(vec![b, p], out)?;
        self.push(value, Op::Affine { x, weight, bias })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[f64], clip: f64) -> Result<NodeId> {
        let p = self.value(probs);
        if p.len() != labels.len() {
            return Err(Error::dim("cross_entropy", "label count", p.len(), labels.len()));
        }
        let value = Tensor::scalar(cross_entropy_value(p.data(), labels, clip));
        self.push(
            value,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                clip,
            },
        )
    }

    /// `(λ/2) ‖U‖²_F` summed over every entry of `u`.
    pub fn frobenius(&mut self, u: NodeId, lambda: f64) -> Result<NodeId> {
        let value = Tensor::scalar(similarity::frobenius_penalty_of(self.value(u), lambda)?);
        self.push(value, Op::Frobenius { u, lambda })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", "element count", av.len(), bv.len()));
        }
        let mut value = av.clone();
        value.add_assign(bv);
        self.push(value, Op::Add { a, b })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "backward from node {} but only {} nodes were recorded by a forward pass",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (target, contribution) in self.node_vjp(node, &g)? {
                match &mut grads[target.0] {
                    Some(existing) => existing.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        param: format!("gradient of node {i}"),
                    });
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn scale_if(&self, fault: BackwardFault, t: Tensor) -> Tensor {
        if self.fault == Some(fault) {
            t.map(|x| 1.01 * x)
        } else {
            t
        }
    }

    fn node_vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Embed { table, ids, frozen_row } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut dt = Tensor::zeros(t.shape());
                for (pos, &id) in ids.iter().enumerate() {
                    if Some(id) == *frozen_row {
                        continue;
                    }
                    let src = &g.data()[pos * d..(pos + 1) * d];
                    for (dst, s) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Similarity { measurement, q, a, metric } => {
                let (qv, av) = (self.value(*q), self.value(*a));
                let b = qv.shape()[0];
                let mut dq = Vec::with_capacity(b);
                let mut da = Vec::with_capacity(b);
                let mut out = Vec::new();
                match metric {
                    Some((u, bias)) => {
                        let uv = self.value(*u);
                        let mut du = Tensor::zeros(uv.shape());
                        let mut dbias = Tensor::zeros(self.value(*bias).shape());
                        for s in 0..b {
                            let mg = similarity::metric_similarity_backward(&qv.slice_outer(s), &av.slice_outer(s), uv, &g.slice_outer(s))?;
                            dq.push(mg.q);
                            da.push(mg.a);
                            du.add_assign(&mg.u);
                            dbias.add_assign(&mg.bias);
                        }
                        out.push((*u, self.scale_if(BackwardFault::MetricU, du)));
                        out.push((*bias, dbias));
                    }
                    None => {
                        for s in 0..b {
                            let (qs, as_, gs) = (qv.slice_outer(s), av.slice_outer(s), g.slice_outer(s));
                            let (gq, ga) = if *measurement == Measurement::Cosine {
                                similarity::cosine_similarity_backward(&qs, &as_, &gs)?
                            } else {
                                similarity::euclidean_similarity_backward(&qs, &as_, &gs)?
                            };
                            dq.push(gq);
                            da.push(ga);
                        }
                    }
                }
                out.push((*q, Tensor::stack(&dq)?));
                out.push((*a, Tensor::stack(&da)?));
                out
            }
            Op::Conv2d { x, filters, bias } => {
                let (xv, f, bv) = (self.value(*x), self.value(*filters), self.value(*bias));
                let b = xv.shape()[0];
                let per_sample: Vec<Result<ops::Conv2dGrads>> = (0..b)
                    .into_par_iter()
                    .map(|s| ops::conv2d_backward(&xv.slice_outer(s), f, bv, &g.slice_outer(s)))
                    .collect();
                let mut dx = Vec::with_capacity(b);
                let mut df = Tensor::zeros(f.shape());
                let mut db = Tensor::zeros(bv.shape());
                for r in per_sample {
                    let r = r?;
                    dx.push(r.input);
                    df.add_assign(&r.filters);
                    db.add_assign(&r.bias);
                }
                vec![
                    (*x, Tensor::stack(&dx)?),
                    (*filters, self.scale_if(BackwardFault::Conv2dFilters, df)),
                    (*bias, db),
                ]
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let r = ops::batch_norm_backward(cache, self.value(*gamma), g)?;
                vec![(*x, r.input), (*gamma, r.gamma), (*beta, r.beta)]
            }
            Op::Tanh { x } => vec![(*x, ops::tanh_backward(&node.value, g))],
            Op::AvgPool { x, window } => {
                let xv = self.value(*x);
                let b = xv.shape()[0];
                let in_shape = &xv.shape()[1..];
                let dx = (0..b)
                    .map(|s| ops::avg_pool2d_backward(in_shape, *window, &g.slice_outer(s)))
                    .collect::<Result<Vec<_>>>()?;
                vec![(*x, Tensor::stack(&dx)?)]
            }
            Op::Dropout { x, multipliers } => {
                let data = g.data().iter().zip(multipliers).map(|(v, m)| v * m).collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Flatten { x } => vec![(*x, g.clone().reshape(self.value(*x).shape().to_vec())?)],
            Op::Concat { left, right } => {
                let m = self.value(*left).shape()[1];
                let n = self.value(*right).shape()[1];
                let b = g.shape()[0];
                let mut dl = Vec::with_capacity(b * m);
                let mut dr = Vec::with_capacity(b * n);
                for row in g.data().chunks(m + n) {
                    dl.extend_from_slice(&row[..m]);
                    dr.extend_from_slice(&row[m..]);
                }
                vec![(*left, Tensor::new(vec![b, m], dl)?), (*right, Tensor::new(vec![b, n], dr)?)]
            }
            Op::Affine { x, weight, bias } => {
                let (xv, w) = (self.value(*x), self.value(*weight));
                let (b, m) = (xv.shape()[0], xv.shape()[1]);
                let p = w.shape()[0];
                let mut dx = vec![0.0; b * m];
                ops::gemm(b, p, m, g.data(), false, w.data(), false, &mut dx, false);
                let mut dw = vec![0.0; p * m];
                ops::gemm(p, b, m, g.data(), true, xv.data(), false, &mut dw, false);
                let mut db = vec![0.0; p];
                for row in g.data().chunks(p) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![
                    (*x, Tensor::new(vec![b, m], dx)?),
                    (*weight, Tensor::new(vec![p, m], dw)?),
                    (*bias, Tensor::new(vec![p], db)?),
                ]
            }
            Op::Sigmoid { x } => {
                let data = node.value.data().iter().zip(g.data()).map(|(y, gv)| gv * y * (1.0 - y)).collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::CrossEntropy { probs, labels, clip } => {
                let p = self.value(*probs);
                let scale = g.item();
                let data = cross_entropy_grad(p.data(), labels, *clip).into_iter().map(|v| v * scale).collect();
                vec![(*probs, Tensor::new(p.shape().to_vec(), data)?)]
            }
            Op::Frobenius { u, lambda } => {
                let scale = g.item() * lambda;
                vec![(*u, self.value(*u).map(|v| scale * v))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sum { x } => {
                let v = g.item();
                vec![(*x, Tensor::full(self.value(*x).shape(), v))]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tanh_of_dot_at_zero_weight() {
        let mut g = ComputeGraph::new();
        let xs = [0.3, -1.2, 2.5];
        let x = g.leaf(t(&[1, 3], &xs));
        let w = g.leaf(Tensor::zeros(&[1, 3]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let z = g.affine(x, w, b).unwrap();
        let y = g.tanh(z).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &xs);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(t(&[1, 2], &[0.4, -0.9]));
        let y1 = g.tanh(x).unwrap();
        let once = g.sum(y1).unwrap();
        let single = g.backward(once).unwrap().wrt(x);

        let mut g2 = ComputeGraph::new();
        let x2 = g2.leaf(t(&[1, 2], &[0.4, -0.9]));
        let y = g2.tanh(x2).unwrap();
        let yy = g2.add(y, y).unwrap();
        let loss = g2.sum(yy).unwrap();
        let double = g2.backward(loss).unwrap().wrt(x2);
        for (a, b) in single.data().iter().zip(double.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = ComputeGraph::new();
        let x = g.leaf(Tensor::ones(&[3]));
        let unused = g.leaf(Tensor::ones(&[2, 2]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_errors() {
        let g = ComputeGraph::new();
        assert!(matches!(g.backward(NodeId(0)), Err(Error::State(_))));
        let mut g = ComputeGraph::new();
        let x = g.leaf(Tensor::ones(&[3]));
        assert!(matches!(g.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn embed_skips_frozen_row() {
        let mut g = ComputeGraph::new();
        let table = g.leaf(t(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]));
        let e = g.embed(table, &[2, 0, 2, 1], 2, Some(0)).unwrap();
        assert_eq!(g.value(e).shape(), &[2, 2, 2]);
        assert_eq!(g.value(e).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0, 1.0, 2.0]);
        let s = g.sum(e).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(table).data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert!(g.embed(table, &[5], 1, None).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy_value(&[0.5, 0.5], &[1.0, 0.0], 1e-7) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy_value(&[1.0, 0.0], &[1.0, 0.0], 1e-7) < 1e-6);
        assert_eq!(cross_entropy_grad(&[1.0], &[1.0], 1e-7), vec![0.0]);
    }
}
