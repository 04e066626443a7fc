//! MAP / MRR with trec_eval semantics, run files and qrels.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    /// Position of the candidate in its question; breaks score ties (ascending).
    pub id: usize,
    pub docid: String,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuestion {
    pub qid: String,
    pub candidates: Vec<ScoredCandidate>,
}

impl RankedQuestion {
    /// Builds a question from scores and labels in candidate order.
    pub fn from_scores(qid: impl Into<String>, scores: &[f64], labels: &[bool]) -> Self {
        assert_eq!(scores.len(), labels.len(), "one label per score");
        Self {
            qid: qid.into(),
            candidates: scores
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (&score, &label))| ScoredCandidate {
                    id: i,
                    docid: docid_for(i),
                    score,
                    label,
                })
                .collect(),
        }
    }

    /// Candidates by descending score, ties by ascending id.
    pub fn ranked(&self) -> Vec<&ScoredCandidate> {
        let mut v: Vec<&ScoredCandidate> = self.candidates.iter().collect();
        v.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        v
    }

    pub fn ranked_labels(&self) -> Vec<bool> {
        self.ranked().into_iter().map(|c| c.label).collect()
    }

    pub fn has_ties(&self) -> bool {
        let r = self.ranked();
        r.windows(2).any(|w| w[0].score == w[1].score)
    }
}

/// Document id of the `i`-th candidate; zero padding keeps string order
/// equal to numeric order.
pub fn docid_for(i: usize) -> String {
    format!("{i:04}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedRun {
    pub run_id: String,
    pub questions: Vec<RankedQuestion>,
}

/// Mean over positives of precision at each positive's rank.
pub fn average_precision(ranked_labels: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &rel) in ranked_labels.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::UndefinedMetric("average precision of a ranking without positives".into()));
    }
    Ok(sum / hits as f64)
}

/// `1 / rank` of the first positive.
pub fn reciprocal_rank(ranked_labels: &[bool]) -> Result<f64> {
    ranked_labels
        .iter()
        .position(|&r| r)
        .map(|p| 1.0 / (p + 1) as f64)
        .ok_or_else(|| Error::UndefinedMetric("reciprocal rank of a ranking without positives".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionMetrics {
    pub qid: String,
    pub average_precision: f64,
    pub reciprocal_rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub run_id: String,
    pub map: f64,
    pub mrr: f64,
    pub per_question: Vec<QuestionMetrics>,
    /// Questions left out because they have no positive candidate.
    pub excluded: Vec<String>,
    /// Questions whose ranking depended on the id tie-break.
    pub tied: Vec<String>,
}

impl EvalReport {
    pub fn questions(&self) -> usize {
        self.per_question.len()
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run_id={}", self.run_id);
        let _ = writeln!(s, "questions={}", self.questions());
        let _ = writeln!(s, "map={:.6}", self.map);
        let _ = writeln!(s, "mrr={:.6}", self.mrr);
        let _ = writeln!(s, "excluded={}", self.excluded.len());
        let _ = writeln!(s, "tied={}", self.tied.len());
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.per_question.iter().map(|q| q.qid.len()).chain(["question".len(), "all".len()]).max().unwrap_or(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>8}", "question", "AP", "RR");
        for q in &self.per_question {
            let _ = writeln!(s, "{:<width$}  {:>8.4}  {:>8.4}", q.qid, q.average_precision, q.reciprocal_rank);
        }
        let _ = writeln!(s, "{:<width$}  {:>8.4}  {:>8.4}", "all", self.map, self.mrr);
        if !self.excluded.is_empty() {
            let _ = writeln!(s, "excluded (no positives): {}", self.excluded.join(" "));
        }
        if !self.tied.is_empty() {
            let _ = writeln!(
                s,
                "note: tied scores in {} question(s); ties are ordered by candidate id, trec_eval orders them by descending docno",
                self.tied.len()
            );
        }
        s
    }
}

pub fn evaluate(run: &RankedRun) -> Result<EvalReport> {
    if run.questions.is_empty() {
        return Err(Error::UndefinedMetric("cannot evaluate an empty run".into()));
    }
    let mut per_question = Vec::with_capacity(run.questions.len());
    let mut excluded = Vec::new();
    let mut tied = Vec::new();
    for q in &run.questions {
        if q.candidates.iter().any(|c| !c.score.is_finite()) {
            return Err(Error::UndefinedMetric(format!("non-finite score in question {}", q.qid)));
        }
        let labels = q.ranked_labels();
        if !labels.iter().any(|&l| l) {
            log::warn!("question {} has no positive candidate; excluded from MAP/MRR", q.qid);
            excluded.push(q.qid.clone());
            continue;
        }
        if q.has_ties() {
            tied.push(q.qid.clone());
        }
        per_question.push(QuestionMetrics {
            qid: q.qid.clone(),
            average_precision: average_precision(&labels)?,
            reciprocal_rank: reciprocal_rank(&labels)?,
        });
    }
    if per_question.is_empty() {
        return Err(Error::UndefinedMetric("no question in the run has a positive candidate".into()));
    }
    let n = per_question.len() as f64;
    Ok(EvalReport {
        run_id: run.run_id.clone(),
        map: per_question.iter().map(|q| q.average_precision).sum::<f64>() / n,
        mrr: per_question.iter().map(|q| q.reciprocal_rank).sum::<f64>() / n,
        per_question,
        excluded,
        tied,
    })
}

/// Six-column run file: `qid Q0 docid rank score runid`.
pub fn format_run(run: &RankedRun) -> String {
    let mut s = String::new();
    for q in &run.questions {
        for (rank, c) in q.ranked().into_iter().enumerate() {
            let _ = writeln!(s, "{} Q0 {} {} {:.6} {}", q.qid, c.docid, rank + 1, c.score, run.run_id);
        }
    }
    s
}

/// Four-column qrels: `qid 0 docid relevance`.
pub fn format_qrels(run: &RankedRun) -> String {
    let mut s = String::new();
    for q in &run.questions {
        for c in &q.candidates {
            let _ = writeln!(s, "{} 0 {} {}", q.qid, c.docid, u8::from(c.label));
        }
    }
    s
}

pub fn emit_run_file(run: &RankedRun, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_run(run)).map_err(|e| Error::io(path, e))
}

pub fn emit_qrels_file(run: &RankedRun, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_qrels(run)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub docid: String,
    pub rank: usize,
    pub score: f64,
}

/// Parsed run file: entries per qid in file order, plus first-seen qid order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    pub run_id: String,
    pub order: Vec<String>,
    pub entries: HashMap<String, Vec<RunEntry>>,
}

pub fn parse_run_file(path: impl AsRef<Path>) -> Result<RunFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_str(&text, path)
}

pub fn parse_run_str(text: &str, origin: &Path) -> Result<RunFile> {
    let mut out = RunFile::default();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [qid, _, docid, rank, score, run_id] = f[..] else {
            return Err(err(format!("expected 6 columns, found {}", f.len())));
        };
        let rank = rank.parse().map_err(|_| err(format!("invalid rank `{rank}`")))?;
        let score = score.parse().map_err(|_| err(format!("invalid score `{score}`")))?;
        out.run_id = run_id.to_string();
        if !out.entries.contains_key(qid) {
            out.order.push(qid.to_string());
        }
        out.entries.entry(qid.to_string()).or_default().push(RunEntry {
            docid: docid.to_string(),
            rank,
            score,
        });
    }
    Ok(out)
}

/// qid → (docid → relevance).
pub type Qrels = HashMap<String, HashMap<String, u32>>;

pub fn parse_qrels_file(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Qrels = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let [qid, _, docid, rel] = f[..] else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected 4 columns, found {}", f.len()),
            });
        };
        let rel = rel.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("invalid relevance `{rel}`"),
        })?;
        out.entry(qid.to_string()).or_default().insert(docid.to_string(), rel);
    }
    Ok(out)
}

/// Joins a run file with qrels; docids absent from the qrels are non-relevant.
/// Candidate ids follow the docids' sorted order.
pub fn run_from_files(run: &RunFile, qrels: &Qrels) -> RankedRun {
    let questions = run
        .order
        .iter()
        .map(|qid| {
            let judged = qrels.get(qid);
            let mut entries: Vec<&RunEntry> = run.entries[qid].iter().collect();
            entries.sort_by(|a, b| a.docid.cmp(&b.docid));
            RankedQuestion {
                qid: qid.clone(),
                candidates: entries
                    .into_iter()
                    .enumerate()
                    .map(|(i, e)| ScoredCandidate {
                        id: i,
                        docid: e.docid.clone(),
                        score: e.score,
                        label: judged.and_then(|j| j.get(&e.docid)).is_some_and(|&r| r > 0),
                    })
                    .collect(),
            }
        })
        .collect();
    RankedRun {
        run_id: run.run_id.clone(),
        questions,
    }
}
