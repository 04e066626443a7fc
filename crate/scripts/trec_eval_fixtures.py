#!/usr/bin/env python3
"""Regenerate the trec_eval equivalence fixtures.

Writes randomized tie-free runs and qrels to crates/core/tests/fixtures/trec/
and records trec_eval's MAP and MRR (computed with pytrec_eval, which wraps
the official trec_eval code) in expected.tsv.

    pip install pytrec-eval-terrier
    python3 scripts/trec_eval_fixtures.py
"""
import os
import random
import statistics

import pytrec_eval

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures", "trec")
CASES = 10
SEED = 20240611


def make_case(rng):
    run, qrels = {}, {}
    for q in range(rng.randint(1, 20)):
        qid = f"q{q:03d}"
        n = rng.randint(1, 30)
        labels = [int(rng.random() < rng.uniform(0.05, 0.5)) for _ in range(n)]
        if not any(labels):
            labels[rng.randrange(n)] = 1
        scores = set()
        while len(scores) < n:
            scores.add(round(rng.uniform(0.0, 1.0), 6))
        scores = list(scores)
        rng.shuffle(scores)
        run[qid] = {f"{i:04d}": s for i, s in enumerate(scores)}
        qrels[qid] = {f"{i:04d}": l for i, l in enumerate(labels)}
    return run, qrels


def write_case(idx, run, qrels):
    with open(os.path.join(OUT, f"case{idx:02d}.run"), "w") as f:
        for qid, docs in run.items():
            ranked = sorted(docs.items(), key=lambda kv: -kv[1])
            for rank, (doc, score) in enumerate(ranked, 1):
                f.write(f"{qid} Q0 {doc} {rank} {score:.6f} fixture\n")
    with open(os.path.join(OUT, f"case{idx:02d}.qrels"), "w") as f:
        for qid, docs in qrels.items():
            for doc, rel in docs.items():
                f.write(f"{qid} 0 {doc} {rel}\n")


def main():
    os.makedirs(OUT, exist_ok=True)
    rng = random.Random(SEED)
    rows = ["# case\tquestions\tmap\tmrr (trec_eval via pytrec_eval)"]
    for idx in range(CASES):
        run, qrels = make_case(rng)
        write_case(idx, run, qrels)
        evaluator = pytrec_eval.RelevanceEvaluator(qrels, {"map", "recip_rank"})
        per_q = evaluator.evaluate(run)
        m = statistics.fmean(v["map"] for v in per_q.values())
        r = statistics.fmean(v["recip_rank"] for v in per_q.values())
        rows.append(f"case{idx:02d}\t{len(run)}\t{m:.10f}\t{r:.10f}")
    with open(os.path.join(OUT, "expected.tsv"), "w") as f:
        f.write("\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
