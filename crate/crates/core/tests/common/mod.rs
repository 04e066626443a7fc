#![allow(dead_code)]

use m2snet::ops::{self, BnMode, PoolWindow, RunningStats, BN_EPS};
use m2snet::similarity::{self, MetricParams};
use m2snet::embeddings::EmbeddingTable;
use m2snet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ORACLE_TOLERANCE: f64 = 1e-12;
pub const ORACLE_INSTANCES: usize = 100;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- naive loop oracles ----

pub fn conv_oracle(x: &Tensor, f: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (nf, kh, kw) = (f.shape()[0], f.shape()[2], f.shape()[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; nf * oh * ow];
    for o in 0..nf {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = b.data()[o];
                for ch in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            s += f.data()[((o * c + ch) * kh + u) * kw + v] * x.data()[(ch * h + i + u) * w + j + v];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = s;
            }
        }
    }
    out
}

pub fn pool_oracle(x: &Tensor, win: PoolWindow) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = (h - win.height) / win.stride_h + 1;
    let ow = (w - win.width) / win.stride_w + 1;
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for u in 0..win.height {
                    for v in 0..win.width {
                        s += x.data()[(ch * h + i * win.stride_h + u) * w + j * win.stride_w + v];
                    }
                }
                out.push(s / (win.height * win.width) as f64);
            }
        }
    }
    out
}

pub fn affine_oracle(x: &Tensor, wt: &Tensor, b: &Tensor) -> Vec<f64> {
    let (p, m) = (wt.shape()[0], wt.shape()[1]);
    (0..p)
        .map(|i| b.data()[i] + (0..m).map(|j| wt.data()[i * m + j] * x.data()[j]).sum::<f64>())
        .collect()
}

/// Two-pass per-channel statistics over batch and spatial positions.
pub fn bn_oracle(xs: &[Tensor], gamma: &Tensor, beta: &Tensor, stats: Option<(&[f64], &[f64])>) -> Vec<f64> {
    let (c, h, w) = (xs[0].shape()[0], xs[0].shape()[1], xs[0].shape()[2]);
    let hw = h * w;
    let mut out = vec![0.0; xs.len() * c * hw];
    for ch in 0..c {
        let vals: Vec<f64> = xs.iter().flat_map(|x| x.data()[ch * hw..(ch + 1) * hw].to_vec()).collect();
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                (mean, var)
            }
        };
        for (bi, x) in xs.iter().enumerate() {
            for p in 0..hw {
                let xh = (x.data()[ch * hw + p] - mean) / (var + BN_EPS).sqrt();
                out[(bi * c + ch) * hw + p] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    out
}

pub fn metric_oracle(q: &Tensor, a: &Tensor, u: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (l1, d) = (q.shape()[0], q.shape()[1]);
    let l2 = a.shape()[0];
    let k = u.shape()[0];
    let mut out = Vec::new();
    for m in 0..k {
        for i in 0..l1 {
            for j in 0..l2 {
                let mut s = bias.data()[(m * l1 + i) * l2 + j];
                for r in 0..d {
                    for t in 0..d {
                        s += q.data()[i * d + r] * u.data()[(m * d + r) * d + t] * a.data()[j * d + t];
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

pub fn cosine_oracle(q: &Tensor, a: &Tensor) -> Vec<f64> {
    let d = q.shape()[1];
    let mut out = Vec::new();
    for qi in q.data().chunks(d) {
        for aj in a.data().chunks(d) {
            let dot: f64 = qi.iter().zip(aj).map(|(x, y)| x * y).sum();
            let nq = qi.iter().map(|x| x * x).sum::<f64>().sqrt();
            let na = aj.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.push(if nq == 0.0 || na == 0.0 { 0.0 } else { dot / (nq * na) });
        }
    }
    out
}

pub fn euclidean_oracle(q: &Tensor, a: &Tensor) -> Vec<f64> {
    let d = q.shape()[1];
    let mut out = Vec::new();
    for qi in q.data().chunks(d) {
        for aj in a.data().chunks(d) {
            let dist = qi.iter().zip(aj).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            out.push(1.0 / (1.0 + dist));
        }
    }
    out
}

// ---- randomized comparison against the library ----

pub fn conv_case(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let kh = rng.random_range(1..=h.min(4));
    let kw = rng.random_range(1..=w.min(4));
    let nf = rng.random_range(1..=4);
    let x = rand_tensor(&[c, h, w], rng);
    let f = rand_tensor(&[nf, c, kh, kw], rng);
    let b = rand_tensor(&[nf], rng);
    max_diff(ops::conv2d(&x, &f, &b).unwrap().data(), &conv_oracle(&x, &f, &b))
}

pub fn random_window(h: usize, w: usize, rng: &mut ChaCha8Rng) -> PoolWindow {
    PoolWindow {
        height: rng.random_range(1..=h),
        width: rng.random_range(1..=w),
        stride_h: rng.random_range(1..=3),
        stride_w: rng.random_range(1..=3),
    }
}

pub fn pool_case(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=3);
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let win = random_window(h, w, rng);
    let x = rand_tensor(&[c, h, w], rng);
    max_diff(ops::avg_pool2d(&x, win).unwrap().data(), &pool_oracle(&x, win))
}

pub fn affine_case(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(1..=8);
    let p = rng.random_range(1..=8);
    let x = rand_tensor(&[m], rng);
    let wt = rand_tensor(&[p, m], rng);
    let b = rand_tensor(&[p], rng);
    max_diff(ops::affine(&x, &wt, &b).unwrap().data(), &affine_oracle(&x, &wt, &b))
}

pub fn bn_case(rng: &mut ChaCha8Rng) -> f64 {
    let batch = rng.random_range(2..=5);
    let c = rng.random_range(1..=4);
    let h = rng.random_range(1..=6);
    let w = rng.random_range(1..=6);
    let xs: Vec<Tensor> = (0..batch).map(|_| rand_tensor(&[c, h, w], rng)).collect();
    let gamma = rand_tensor(&[c], rng);
    let beta = rand_tensor(&[c], rng);
    let mut running = RunningStats::new(c);
    let train: Vec<f64> = ops::batch_norm(&xs, &gamma, &beta, BN_EPS, ops::Mode::Train, &mut running)
        .unwrap()
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    let e_train = max_diff(&train, &bn_oracle(&xs, &gamma, &beta, None));

    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..2.0)).collect();
    let stats = RunningStats {
        mean: Tensor::new(vec![c], mean.clone()).unwrap(),
        var: Tensor::new(vec![c], var.clone()).unwrap(),
        ..RunningStats::new(c)
    };
    let (inf, _) = ops::batch_norm_stacked(&Tensor::stack(&xs).unwrap(), &gamma, &beta, BN_EPS, BnMode::Inference(&stats)).unwrap();
    e_train.max(max_diff(inf.data(), &bn_oracle(&xs, &gamma, &beta, Some((&mean, &var)))))
}

fn pair(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let d = rng.random_range(1..=8);
    let l1 = rng.random_range(1..=8);
    let l2 = rng.random_range(1..=8);
    (rand_tensor(&[l1, d], rng), rand_tensor(&[l2, d], rng))
}

pub fn metric_case(rng: &mut ChaCha8Rng) -> f64 {
    let (q, a) = pair(rng);
    let k = rng.random_range(1..=4);
    let d = q.shape()[1];
    let u = rand_tensor(&[k, d, d], rng);
    let bias = rand_tensor(&[k, q.shape()[0], a.shape()[0]], rng);
    let params = MetricParams::new(u.clone(), bias.clone()).unwrap();
    let s = similarity::metric_similarity(&q, &a, &params).unwrap();
    max_diff(s.values.data(), &metric_oracle(&q, &a, &u, &bias))
}

pub fn cosine_case(rng: &mut ChaCha8Rng) -> f64 {
    let (mut q, a) = pair(rng);
    if rng.random_bool(0.2) {
        let d = q.shape()[1];
        q.data_mut()[..d].fill(0.0);
    }
    let s = similarity::cosine_similarity(&q, &a).unwrap();
    max_diff(s.values.data(), &cosine_oracle(&q, &a))
}

pub fn euclidean_case(rng: &mut ChaCha8Rng) -> f64 {
    let (q, a) = pair(rng);
    let s = similarity::euclidean_similarity(&q, &a).unwrap();
    max_diff(s.values.data(), &euclidean_oracle(&q, &a))
}

pub type Case = fn(&mut ChaCha8Rng) -> f64;

pub const LAYER_CASES: [(&str, Case); 7] = [
    ("conv2d", conv_case),
    ("avg_pool2d", pool_case),
    ("affine", affine_case),
    ("batch_norm", bn_case),
    ("metric similarity", metric_case),
    ("cosine similarity", cosine_case),
    ("euclidean similarity", euclidean_case),
];

/// Worst oracle discrepancy of every layer over `n` random instances.
pub fn layer_oracle_errors(seed: u64, n: usize) -> Vec<(&'static str, f64)> {
    LAYER_CASES
        .iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut r = rng(seed.wrapping_add(i as u64));
            (*name, (0..n).map(|_| case(&mut r)).fold(0.0, f64::max))
        })
        .collect()
}

// ---- finite differences ----

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

// ---- toy data ----

pub const TOY_TSV: &str = include_str!("../fixtures/toy.tsv");

pub fn toy_config(measurement: m2snet::Measurement, k: usize) -> m2snet::NetConfig {
    let mut cfg = m2snet::NetConfig::standard(measurement, k, m2snet::Depth::Deep, 10);
    cfg.question_len = 8;
    cfg.answer_len = 8;
    for l in &mut cfg.layers {
        l.filters = 8;
    }
    cfg
}

pub fn toy_train_config(seed: u64) -> m2snet::trainer::TrainConfig {
    m2snet::trainer::TrainConfig {
        batch_size: 10,
        max_epochs: 500,
        patience: 500,
        seed,
        ..Default::default()
    }
}

pub struct Toy {
    pub model: m2snet::MatchNet,
    pub train: Vec<m2snet::data::QAInstance>,
    pub questions: Vec<m2snet::data::EncodedQuestion>,
}

/// The 20-pair toy set, randomly embedded; train and dev are the same questions.
pub fn toy(cfg: m2snet::NetConfig, seed: u64) -> Toy {
    let split = m2snet::data::parse_split_str(TOY_TSV, "toy", std::path::Path::new("toy.tsv")).unwrap();
    let mut words: Vec<String> = split.vocabulary().into_iter().collect();
    words.sort_unstable();
    let table = EmbeddingTable::random(words, cfg.embedding_dim, &mut rng(seed)).unwrap();
    let idf = m2snet::data::build_idf(&split).unwrap();
    let questions = m2snet::data::encode_split(&split, &table, &idf, cfg.question_len, cfg.answer_len);
    let train = questions.iter().flat_map(|q| q.instances.iter().cloned()).collect();
    Toy {
        model: m2snet::MatchNet::new(cfg, table, seed).unwrap(),
        train,
        questions,
    }
}
