//! Answer-selection data: TSV ingestion, degenerate-question filtering,
//! word-overlap features and batching.
//!
//! Interchange format, one candidate per row:
//! `qid<TAB>label<TAB>question<TAB>answer`, rows grouped by `qid`, lines
//! starting with `#` ignored.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{shape_sequence, tokenize, EmbeddingTable, TokenSequence};
use crate::error::{Error, Result};
use crate::ops::Mode;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub tokens: Vec<String>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub qid: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl Question {
    pub fn positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.label).count()
    }

    /// All candidates share one label.
    pub fn is_degenerate(&self) -> bool {
        let p = self.positives();
        p == 0 || p == self.candidates.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: String,
    pub questions: Vec<Question>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitStats {
    pub questions: usize,
    pub pairs: usize,
    pub positives: usize,
}

impl SplitStats {
    pub fn percent_positive(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            100.0 * self.positives as f64 / self.pairs as f64
        }
    }
}

impl DatasetSplit {
    pub fn stats(&self) -> SplitStats {
        SplitStats {
            questions: self.questions.len(),
            pairs: self.questions.iter().map(|q| q.candidates.len()).sum(),
            positives: self.questions.iter().map(Question::positives).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// `n` questions drawn with a seeded shuffle, kept in original order.
    pub fn subsample(&self, n: usize, seed: u64) -> DatasetSplit {
        let mut idx: Vec<usize> = (0..self.questions.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        DatasetSplit {
            name: format!("{}-sub{n}", self.name),
            questions: idx.into_iter().map(|i| self.questions[i].clone()).collect(),
        }
    }

    /// Every token of every question and candidate.
    pub fn vocabulary(&self) -> HashSet<String> {
        let mut v = HashSet::new();
        for q in &self.questions {
            v.extend(q.tokens.iter().cloned());
            for c in &q.candidates {
                v.extend(c.tokens.iter().cloned());
            }
        }
        v
    }
}

pub fn parse_split(path: impl AsRef<Path>, name: &str) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split_str(&content, name, path)
}

/// Parses TSV content; `origin` only labels error messages.
pub fn parse_split_str(content: &str, name: &str, origin: &Path) -> Result<DatasetSplit> {
    let mut questions: Vec<Question> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (lineno, raw) in content.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [qid, label, question, answer] = fields[..] else {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        let label = match label.trim() {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("unknown label `{other}`"))),
        };
        if qid.is_empty() {
            return Err(err("empty question id".into()));
        }
        let candidate = Candidate {
            text: answer.to_string(),
            tokens: tokenize(answer),
            label,
        };
        match questions.last_mut() {
            Some(q) if q.qid == qid => {
                if q.text != question {
                    log::warn!("{}:{}: question text differs within qid {qid}", origin.display(), lineno + 1);
                }
                q.candidates.push(candidate);
            }
            _ => {
                if !seen.insert(qid.to_string()) {
                    return Err(err(format!("rows for question `{qid}` are not contiguous")));
                }
                questions.push(Question {
                    qid: qid.to_string(),
                    text: question.to_string(),
                    tokens: tokenize(question),
                    candidates: vec![candidate],
                });
            }
        }
    }
    Ok(DatasetSplit {
        name: name.to_string(),
        questions,
    })
}

/// Drops questions whose candidates are all positive or all negative.
pub fn filter_degenerate(split: &DatasetSplit) -> DatasetSplit {
    DatasetSplit {
        name: split.name.clone(),
        questions: split.questions.iter().filter(|q| !q.is_degenerate()).cloned().collect(),
    }
}

/// Inverse document frequencies over candidate answer sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    weights: HashMap<String, f64>,
    documents: usize,
    max_idf: f64,
}

impl IdfTable {
    pub fn from_weights(weights: HashMap<String, f64>, documents: usize) -> Self {
        let max_idf = weights.values().copied().fold(0.0, f64::max);
        Self {
            weights,
            documents,
            max_idf,
        }
    }

    /// Weight of `token`; unseen tokens get the largest observed weight.
    pub fn idf(&self, token: &str) -> f64 {
        self.weights.get(token).copied().unwrap_or(self.max_idf)
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    pub fn max_idf(&self) -> f64 {
        self.max_idf
    }

    pub fn weights(&self) -> &HashMap<String, f64> {
        &self.weights
    }
}

/// `idf(t) = ln(N / df(t))`, each candidate answer sentence one document.
pub fn build_idf(split: &DatasetSplit) -> Result<IdfTable> {
    let mut df: HashMap<String, usize> = HashMap::new();
    let mut n = 0usize;
    for q in &split.questions {
        for c in &q.candidates {
            n += 1;
            let unique: HashSet<&String> = c.tokens.iter().collect();
            for t in unique {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Config(format!("cannot build IDF from empty split `{}`", split.name)));
    }
    let weights = df
        .into_iter()
        .map(|(t, d)| (t, (n as f64 / d as f64).ln()))
        .collect();
    Ok(IdfTable::from_weights(weights, n))
}

/// `[overlap, idf_overlap]` between a question and an answer:
/// `|U(q) ∩ U(a)| / |U(q)|` and `Σ_{q∩a} idf / Σ_{U(q)} idf`, each 0 when
/// its denominator is 0.
pub fn overlap_features(question: &[String], answer: &[String], idf: &IdfTable) -> [f64; 2] {
    let uq: HashSet<&str> = question.iter().map(String::as_str).collect();
    let ua: HashSet<&str> = answer.iter().map(String::as_str).collect();
    if uq.is_empty() {
        return [0.0, 0.0];
    }
    // Sort to keep the floating-point summation order fixed.
    let mut common: Vec<&str> = uq.intersection(&ua).copied().collect();
    common.sort_unstable();
    let mut all: Vec<&str> = uq.iter().copied().collect();
    all.sort_unstable();
    let overlap = common.len() as f64 / uq.len() as f64;
    let num: f64 = common.iter().map(|t| idf.idf(t)).sum();
    let den: f64 = all.iter().map(|t| idf.idf(t)).sum();
    let idf_overlap = if den > 0.0 { num / den } else { 0.0 };
    [overlap, idf_overlap]
}

pub const OVERLAP_FEATURES: usize = 2;

/// One question–candidate pair ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct QAInstance {
    pub qid: String,
    /// Position of the candidate within its question.
    pub candidate: usize,
    pub question: TokenSequence,
    pub answer: TokenSequence,
    pub label: f64,
    pub features: [f64; OVERLAP_FEATURES],
}

/// Encoded instances grouped per question, in split order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuestion {
    pub qid: String,
    pub instances: Vec<QAInstance>,
}

/// Shapes and featurizes every pair of a split.
pub fn encode_split(
    split: &DatasetSplit,
    table: &EmbeddingTable,
    idf: &IdfTable,
    question_len: usize,
    answer_len: usize,
) -> Vec<EncodedQuestion> {
    let mut sentences = 0usize;
    let mut truncated = 0usize;
    let out: Vec<EncodedQuestion> = split
        .questions
        .iter()
        .map(|q| {
            let qseq = shape_sequence(&q.tokens, question_len, table);
            let instances = q
                .candidates
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let aseq = shape_sequence(&c.tokens, answer_len, table);
                    sentences += 2;
                    truncated += usize::from(qseq.truncated()) + usize::from(aseq.truncated());
                    QAInstance {
                        qid: q.qid.clone(),
                        candidate: i,
                        question: qseq.clone(),
                        answer: aseq,
                        label: if c.label { 1.0 } else { 0.0 },
                        features: overlap_features(&q.tokens, &c.tokens, idf),
                    }
                })
                .collect();
            EncodedQuestion {
                qid: q.qid.clone(),
                instances,
            }
        })
        .collect();
    if sentences > 0 && truncated as f64 / sentences as f64 > 0.05 {
        log::warn!(
            "split `{}`: {:.1}% of sentences exceed the fixed lengths ({question_len}/{answer_len}) and were truncated",
            split.name,
            100.0 * truncated as f64 / sentences as f64
        );
    }
    out
}

/// Index batches over `n` instances. Train mode shuffles by `seed` and drops
/// a short final batch; inference mode keeps order and every instance.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, mode: Mode) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || (mode == Mode::Train && batch_size < 2) {
        return Err(Error::Config(format!("batch size {batch_size} too small (batch normalization needs at least 2)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if mode == Mode::Train {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if mode == Mode::Train && batches.last().is_some_and(|b| b.len() < batch_size) {
        batches.pop();
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn split(rows: &str) -> DatasetSplit {
        parse_split_str(rows, "t", Path::new("mem.tsv")).unwrap()
    }

    const SAMPLE: &str = "# comment\n\
        q1\t1\tWhen did Amtrak begin operations?\tAmtrak began in 1971.\n\
        q1\t0\tWhen did Amtrak begin operations?\tIt has not turned a profit.\n\
        q2\t1\tWho founded it?\tSomeone founded it.\n\
        q2\t1\tWho founded it?\tSomebody else.\n\
        q3\t0\tWhere?\tNowhere.\n";

    #[test]
    fn parse_groups_rows() {
        let s = split(SAMPLE);
        assert_eq!(s.questions.len(), 3);
        assert_eq!(s.questions[0].candidates.len(), 2);
        assert_eq!(s.questions[0].tokens, toks("when did amtrak begin operations"));
        assert_eq!(s.stats(), SplitStats { questions: 3, pairs: 5, positives: 3 });
        assert!((s.stats().percent_positive() - 60.0).abs() < 1e-12);
    }

    #[test]
    fn parse_empty() {
        let s = split("");
        assert!(s.is_empty());
        assert_eq!(s.stats(), SplitStats { questions: 0, pairs: 0, positives: 0 });
        assert_eq!(s.stats().percent_positive(), 0.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "q1\t1\ta\tb\nq1\t2\ta\tb\n";
        match parse_split_str(bad, "t", Path::new("x")) {
            Err(Error::Parse { line: 2, message, .. }) => assert!(message.contains("label")),
            other => panic!("{other:?}"),
        }
        match parse_split_str("q1\t1\tonly three\n", "t", Path::new("x")) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_split_str("q1\t1\ta\tb\nq2\t0\ta\tb\nq1\t0\ta\tc\n", "t", Path::new("x")) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn filtering_rules() {
        let s = split(SAMPLE);
        let f = filter_degenerate(&s);
        assert_eq!(f.questions.len(), 1);
        assert_eq!(f.questions[0].qid, "q1");
        assert_eq!(filter_degenerate(&f), f);
    }

    #[test]
    fn idf_formula() {
        let s = split("q\t1\tx\talpha beta\nq\t0\tx\talpha gamma\nq\t0\tx\talpha beta delta\n");
        let idf = build_idf(&s).unwrap();
        assert_eq!(idf.documents(), 3);
        assert_eq!(idf.idf("alpha"), 0.0);
        assert!((idf.idf("beta") - (1.5f64).ln()).abs() < 1e-15);
        assert!((idf.idf("gamma") - 3f64.ln()).abs() < 1e-15);
        assert!((idf.idf("delta") - 3f64.ln()).abs() < 1e-15);
        // unseen tokens take the maximum
        assert!((idf.idf("epsilon") - 3f64.ln()).abs() < 1e-15);

        let ten: String = (0..10).map(|i| format!("q\t0\tx\tcommon{}\n", if i == 0 { " rare" } else { "" })).collect();
        let idf = build_idf(&split(&ten)).unwrap();
        assert!((idf.idf("rare") - 10f64.ln()).abs() < 1e-12);
        assert!(build_idf(&split("")).is_err());
    }

    #[test]
    fn overlap_examples() {
        let idf = IdfTable::from_weights(HashMap::new(), 1);
        let uniform = IdfTable::from_weights(
            ["when", "did", "amtrak", "profit"].iter().map(|t| (t.to_string(), 1.0)).collect(),
            4,
        );
        let q = toks("when did amtrak");
        assert_eq!(overlap_features(&q, &q, &uniform), [1.0, 1.0]);
        assert_eq!(overlap_features(&q, &toks("nothing shared"), &uniform), [0.0, 0.0]);
        let f = overlap_features(&q, &toks("amtrak profit"), &uniform);
        assert!((f[0] - 1.0 / 3.0).abs() < 1e-15 && (f[1] - 1.0 / 3.0).abs() < 1e-15);
        // all-zero weights → idf overlap 0 by convention
        assert_eq!(overlap_features(&q, &q, &idf), [1.0, 0.0]);
        assert_eq!(overlap_features(&[], &q, &uniform), [0.0, 0.0]);
    }

    #[test]
    fn overlap_formula_is_not_symmetric() {
        let idf = IdfTable::from_weights(HashMap::new(), 1);
        let q = toks("a b c d");
        let a = toks("a b");
        assert_eq!(overlap_features(&q, &a, &idf)[0], 0.5);
        assert_eq!(overlap_features(&a, &q, &idf)[0], 1.0);
    }

    #[test]
    fn batching_rules() {
        let b = make_batches(10, 4, 3, Mode::Train).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        assert_eq!(b, make_batches(10, 4, 3, Mode::Train).unwrap());
        let e = make_batches(10, 4, 3, Mode::Inference).unwrap();
        assert_eq!(e.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(e.concat(), (0..10).collect::<Vec<_>>());
        assert!(make_batches(10, 1, 3, Mode::Train).is_err());
    }

    #[test]
    fn subsample_is_deterministic_and_ordered() {
        let text: String = (0..30).map(|i| format!("q{i}\t1\tx\ty\nq{i}\t0\tx\tz\n")).collect();
        let s = split(&text);
        let a = s.subsample(10, 5);
        assert_eq!(a.questions.len(), 10);
        assert_eq!(a, s.subsample(10, 5));
        let pos: Vec<usize> = a.questions.iter().map(|q| q.qid[1..].parse().unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}
