mod common;

use std::io::Write;

use common::*;
use m2snet::data::{self, IdfTable};
use m2snet::embeddings::{self, EmbeddingTable, PAD};
use m2snet::eval::{self, RankedQuestion, RankedRun};
use m2snet::graph::ComputeGraph;
use m2snet::similarity::{self, MetricParams};
use m2snet::Tensor;
use proptest::prelude::*;

fn transpose2(t: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; t.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = t[i * cols + j];
        }
    }
    out
}

fn transpose_channels(t: &Tensor) -> Tensor {
    let (k, r, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let data = (0..k).flat_map(|m| transpose2(&t.data()[m * r * c..(m + 1) * r * c], r, c)).collect();
    Tensor::new(vec![k, c, r], data).unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=8, 1usize..=8, 1usize..=8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swapping_sentences_transposes_similarity((l1, l2, d, seed) in dims(), k in 1usize..=3) {
        let mut r = rng(seed);
        let q = rand_tensor(&[l1, d], &mut r);
        let a = rand_tensor(&[l2, d], &mut r);
        for (fwd, back) in [
            (similarity::cosine_similarity(&q, &a).unwrap(), similarity::cosine_similarity(&a, &q).unwrap()),
            (similarity::euclidean_similarity(&q, &a).unwrap(), similarity::euclidean_similarity(&a, &q).unwrap()),
        ] {
            prop_assert!(max_diff(transpose_channels(&fwd.values).data(), back.values.data()) <= 1e-15);
        }
        let u = rand_tensor(&[k, d, d], &mut r);
        let b = rand_tensor(&[k, l1, l2], &mut r);
        let fwd = similarity::metric_similarity(&q, &a, &MetricParams::new(u.clone(), b.clone()).unwrap()).unwrap();
        let swapped = MetricParams::new(transpose_channels(&u), transpose_channels(&b)).unwrap();
        let back = similarity::metric_similarity(&a, &q, &swapped).unwrap();
        prop_assert!(max_diff(transpose_channels(&fwd.values).data(), back.values.data()) <= 1e-12);
    }

    #[test]
    fn metric_channels_are_independent((l1, l2, d, seed) in dims(), k in 2usize..=4) {
        let mut r = rng(seed);
        let q = rand_tensor(&[l1, d], &mut r);
        let a = rand_tensor(&[l2, d], &mut r);
        let u = rand_tensor(&[k, d, d], &mut r);
        let b = rand_tensor(&[k, l1, l2], &mut r);
        let all = similarity::metric_similarity(&q, &a, &MetricParams::new(u.clone(), b.clone()).unwrap()).unwrap();
        for m in 0..k {
            let single = MetricParams::new(u.slice_outer(m).reshape(vec![1, d, d]).unwrap(), b.slice_outer(m).reshape(vec![1, l1, l2]).unwrap()).unwrap();
            let s = similarity::metric_similarity(&q, &a, &single).unwrap();
            prop_assert_eq!(s.values.data(), all.values.outer(m));
        }
    }

    #[test]
    fn cosine_is_scale_invariant_and_euclidean_is_not((l1, l2, d, seed) in dims(), scale in 1.5f64..10.0) {
        let mut r = rng(seed);
        let q = rand_tensor(&[l1, d], &mut r);
        let a = rand_tensor(&[l2, d], &mut r);
        let qs = q.map(|v| v * scale);
        let cos = similarity::cosine_similarity(&q, &a).unwrap();
        let cos_s = similarity::cosine_similarity(&qs, &a).unwrap();
        prop_assert!(max_diff(cos.values.data(), cos_s.values.data()) <= 1e-12);
        let euc = similarity::euclidean_similarity(&q, &a).unwrap();
        let euc_s = similarity::euclidean_similarity(&qs, &a).unwrap();
        prop_assert!(max_diff(euc.values.data(), euc_s.values.data()) > 1e-6);
    }

    #[test]
    fn gradients_accumulate_exactly(n in 1usize..=20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = rand_tensor(&[1, n], &mut r);
        let w = rand_tensor(&[1, n], &mut r);
        let build = |g: &mut ComputeGraph, x, wn, bn| {
            let t = g.tanh(x).unwrap();
            let y = g.affine(t, wn, bn).unwrap();
            g.sum(y).unwrap()
        };
        let mut g1 = ComputeGraph::new();
        let (x1, w1, b1) = (g1.leaf(x.clone()), g1.leaf(w.clone()), g1.leaf(Tensor::zeros(&[1])));
        let single = build(&mut g1, x1, w1, b1);
        let gs = g1.backward(single).unwrap().wrt(x1);

        let mut g2 = ComputeGraph::new();
        let (x2, w2, b2) = (g2.leaf(x), g2.leaf(w), g2.leaf(Tensor::zeros(&[1])));
        let first = build(&mut g2, x2, w2, b2);
        let second = build(&mut g2, x2, w2, b2);
        let total = g2.add(first, second).unwrap();
        let gd = g2.backward(total).unwrap().wrt(x2);
        let doubled: Vec<f64> = gs.data().iter().map(|v| 2.0 * v).collect();
        prop_assert_eq!(gd.data(), &doubled[..]);
    }

    #[test]
    fn forward_backward_is_deterministic(seed in any::<u64>(), drop_seed in any::<u64>()) {
        let run = || {
            let mut r = rng(seed);
            let x = rand_tensor(&[3, 2, 6, 6], &mut r);
            let f = rand_tensor(&[2, 2, 3, 3], &mut r);
            let mut g = ComputeGraph::new();
            let (xn, fnode, bn) = (g.leaf(x), g.leaf(f), g.leaf(Tensor::zeros(&[2])));
            let c = g.conv2d(xn, fnode, bn).unwrap();
            let t = g.tanh(c).unwrap();
            let d = g.dropout(t, 0.5, drop_seed).unwrap();
            let s = g.sum(d).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).item().to_bits(), grads.wrt(xn).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn shaped_lookup_is_raw_lookup_plus_zero_rows(n in 1usize..=12, extra in 0usize..=6, seed in any::<u64>()) {
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let table = EmbeddingTable::random(words.clone(), 4, &mut rng(seed)).unwrap();
        let mut r = rng(seed ^ 1);
        let tokens: Vec<String> = (0..n).map(|_| words[rand::Rng::random_range(&mut r, 0..20)].clone()).collect();
        let seq = embeddings::shape_sequence(&tokens, n + extra, &table);
        let shaped = table.lookup(&seq.ids);
        let raw_ids: Vec<usize> = tokens.iter().map(|t| table.id_or_unk(t)).collect();
        let raw = table.lookup(&raw_ids);
        prop_assert_eq!(&shaped.data()[..n * 4], raw.data());
        prop_assert!(shaped.data()[n * 4..].iter().all(|&v| v == 0.0));
        prop_assert!(seq.ids[n..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn overlap_follows_its_formula(q in prop::collection::vec(0usize..8, 1..10), a in prop::collection::vec(0usize..8, 1..10)) {
        let tok = |v: &[usize]| v.iter().map(|i| format!("t{i}")).collect::<Vec<_>>();
        let (qt, at) = (tok(&q), tok(&a));
        let weights = (0..8).map(|i| (format!("t{i}"), 0.25 + i as f64)).collect();
        let idf = IdfTable::from_weights(weights, 10);
        let [overlap, weighted] = data::overlap_features(&qt, &at, &idf);
        let uq: std::collections::BTreeSet<&String> = qt.iter().collect();
        let ua: std::collections::BTreeSet<&String> = at.iter().collect();
        let common: Vec<&&String> = uq.intersection(&ua).collect();
        prop_assert_eq!(overlap, common.len() as f64 / uq.len() as f64);
        let num: f64 = common.iter().map(|t| idf.idf(t)).sum();
        let den: f64 = uq.iter().map(|t| idf.idf(t)).sum();
        prop_assert!((weighted - num / den).abs() <= 1e-12);
    }

    #[test]
    fn filtering_is_idempotent(labels in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..6), 1..10)) {
        let mut tsv = String::new();
        for (qi, qs) in labels.iter().enumerate() {
            for (ci, l) in qs.iter().enumerate() {
                tsv.push_str(&format!("q{qi}\t{}\tquestion {qi}\tanswer {ci}\n", u8::from(*l)));
            }
        }
        let split = data::parse_split_str(&tsv, "p", std::path::Path::new("p")).unwrap();
        let once = data::filter_degenerate(&split);
        prop_assert_eq!(data::filter_degenerate(&once), once.clone());
        prop_assert!(once.questions.iter().all(|q| !q.is_degenerate()));
    }

    #[test]
    fn moving_a_positive_up_never_lowers_ap(labels in prop::collection::vec(any::<bool>(), 2..30), pick in any::<prop::sample::Index>()) {
        prop_assume!(labels.iter().any(|&l| l));
        let swaps: Vec<usize> = (1..labels.len()).filter(|&i| labels[i] && !labels[i - 1]).collect();
        prop_assume!(!swaps.is_empty());
        let i = swaps[pick.index(swaps.len())];
        let mut better = labels.clone();
        better.swap(i, i - 1);
        let before = eval::average_precision(&labels).unwrap();
        let after = eval::average_precision(&better).unwrap();
        prop_assert!(after >= before);
        prop_assert!((0.0..=1.0).contains(&before) && (0.0..=1.0).contains(&after));
    }

    #[test]
    fn shifting_scores_leaves_report_unchanged(
        qs in prop::collection::vec(prop::collection::vec((-4096i32..4096, any::<bool>()), 1..12), 1..8),
        shift in -4096i32..4096,
    ) {
        let run = |offset: f64| RankedRun {
            run_id: "r".into(),
            questions: qs
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let scores: Vec<f64> = c.iter().map(|(s, _)| *s as f64 / 1024.0 + offset).collect();
                    let labels: Vec<bool> = c.iter().map(|(_, l)| *l).collect();
                    RankedQuestion::from_scores(format!("q{i}"), &scores, &labels)
                })
                .collect(),
        };
        prop_assume!(qs.iter().any(|c| c.iter().any(|(_, l)| *l)));
        let base = eval::evaluate(&run(0.0)).unwrap();
        let moved = eval::evaluate(&run(shift as f64 / 1024.0)).unwrap();
        prop_assert_eq!(&base.per_question, &moved.per_question);
        prop_assert_eq!(base.map.to_bits(), moved.map.to_bits());
        prop_assert!((0.0..=1.0).contains(&base.map) && (0.0..=1.0).contains(&base.mrr));
    }
}

#[test]
fn loading_embeddings_twice_is_identical() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    writeln!(file, "the 0.1 0.2 0.3").unwrap();
    writeln!(file, "cat -1.5 2.0 0.25").unwrap();
    writeln!(file, "the 9 9 9").unwrap();
    writeln!(file, "sat 0 0 1e-3").unwrap();
    let a = embeddings::load_embeddings(file.path(), 3).unwrap();
    let b = embeddings::load_embeddings(file.path(), 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.vocab_hash(), b.vocab_hash());
    assert_eq!(a.row(a.get("the").unwrap()), [0.1, 0.2, 0.3]);
}
