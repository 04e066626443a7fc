//! Vocabulary, tokenization and pre-trained word vectors.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_DIM: usize = 50;

/// Token vocabulary and its `|V| × d` vector matrix. Row 0 is PAD (always
/// zero), row 1 is UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Tensor,
}

impl EmbeddingTable {
    /// Builds a table from tokens in row order (PAD and UNK included) and
    /// their vectors.
    pub fn from_parts(tokens: Vec<String>, vectors: Tensor) -> Result<Self> {
        let [v, _] = *vectors.expect_rank("embedding table", 2)? else {
            unreachable!()
        };
        if v != tokens.len() {
            return Err(Error::dim("embedding table", "row count", tokens.len(), v));
        }
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Config("embedding table must start with the PAD and UNK rows".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        let mut table = Self { tokens, index, vectors };
        table.zero_pad();
        Ok(table)
    }

    /// Random gaussian vectors (σ = 1/√d) for `words`; UNK is the mean vector.
    pub fn random<R: Rng + ?Sized>(words: impl IntoIterator<Item = String>, dim: usize, rng: &mut R) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        let n = tokens.len() - 2;
        let body = Tensor::randn(&[n.max(1), dim], 1.0 / (dim as f64).sqrt(), rng);
        let rows: Vec<&[f64]> = (0..n).map(|i| body.outer(i)).collect();
        let vectors = assemble(dim, &rows, &mean_of(dim, &rows))?;
        Self::from_parts(tokens, vectors)
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.vectors.outer(id)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    /// Replaces the vector matrix (shape must match); PAD is re-zeroed.
    pub fn set_vectors(&mut self, vectors: Tensor) -> Result<()> {
        if vectors.shape() != self.vectors.shape() {
            return Err(Error::dim("embedding table", "element count", self.vectors.len(), vectors.len()));
        }
        self.vectors = vectors;
        self.zero_pad();
        Ok(())
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut Tensor {
        &mut self.vectors
    }

    pub(crate) fn zero_pad(&mut self) {
        let d = self.dim();
        self.vectors.data_mut()[PAD * d..(PAD + 1) * d].fill(0.0);
    }

    /// SHA-256 over the tokens in row order, hex encoded.
    pub fn vocab_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Shaped ids to a `len × d` matrix.
    pub fn lookup(&self, ids: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(self.row(id));
        }
        Tensor::new(vec![ids.len(), d], data).expect("non-empty id list")
    }
}

fn mean_of(dim: usize, rows: &[&[f64]]) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    if rows.is_empty() {
        return mean;
    }
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn assemble(dim: usize, rows: &[&[f64]], unk: &[f64]) -> Result<Tensor> {
    let mut data = vec![0.0; dim];
    data.extend_from_slice(unk);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len() + 2, dim], data)
}

/// Loads a whitespace-separated vector file (`token v1 … vd` per line).
pub fn load_embeddings(path: impl AsRef<Path>, expected_dim: usize) -> Result<EmbeddingTable> {
    load_embeddings_filtered(path, expected_dim, None)
}

/// Like [`load_embeddings`], but only tokens in `keep` enter the vocabulary.
/// UNK is still the mean over every vector in the file.
pub fn load_embeddings_filtered(path: impl AsRef<Path>, expected_dim: usize, keep: Option<&HashSet<String>>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    if expected_dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    let mut seen: HashSet<String> = tokens.iter().cloned().collect();
    let mut kept: Vec<f64> = Vec::new();
    let mut sum = vec![0.0; expected_dim];
    let mut count = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("invalid number `{f}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != expected_dim {
            return Err(parse_err(format!("expected {expected_dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        if !seen.insert(token.to_string()) {
            log::warn!("{}:{}: duplicate token `{token}`, keeping first occurrence", path.display(), lineno + 1);
            continue;
        }
        for (s, v) in sum.iter_mut().zip(&values) {
            *s += v;
        }
        count += 1;
        if keep.is_none_or(|k| k.contains(token)) {
            tokens.push(token.to_string());
            kept.extend_from_slice(&values);
        }
    }

    let unk: Vec<f64> = if count == 0 {
        sum
    } else {
        sum.iter().map(|s| s / count as f64).collect()
    };
    let rows: Vec<&[f64]> = kept.chunks(expected_dim).collect();
    let vectors = assemble(expected_dim, &rows, &unk)?;
    EmbeddingTable::from_parts(tokens, vectors)
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '–' | '—' | '¿' | '¡')
}

/// Lowercase, split on whitespace, strip leading/trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(is_punct).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token ids shaped to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Token count before padding or truncation.
    pub original_len: usize,
}

impl TokenSequence {
    pub fn truncated(&self) -> bool {
        self.original_len > self.ids.len()
    }
}

/// Maps tokens to ids (UNK when unknown), truncating or PAD-filling at the tail.
pub fn shape_sequence(tokens: &[String], fixed_len: usize, table: &EmbeddingTable) -> TokenSequence {
    let mut ids: Vec<usize> = tokens.iter().take(fixed_len).map(|t| table.id_or_unk(t)).collect();
    ids.resize(fixed_len, PAD);
    TokenSequence {
        ids,
        original_len: tokens.len(),
    }
}
