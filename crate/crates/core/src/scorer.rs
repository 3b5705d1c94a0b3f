//! Relevance scoring of (question, text unit) pairs and top-k selection.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::textproc::tokenize_words;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("cannot score against an empty corpus")]
    EmptyCorpus,
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("first selection is empty")]
    EmptySelection,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("scorer returned {0}, outside [0, 1]")]
    OutOfRange(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUnit {
    pub unit_index: usize,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self, ScoreError> {
        if !(k1 > 0.0 && k1.is_finite()) {
            return Err(ScoreError::InvalidParams(format!("k1 must be positive, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(ScoreError::InvalidParams(format!("b must lie in [0, 1], got {b}")));
        }
        Ok(Self { k1, b })
    }
}

/// Okapi BM25 with the non-negative `ln(1 + (N - df + 0.5) / (df + 0.5))` idf.
pub fn bm25_scores<S: AsRef<str>>(
    query_tokens: &[S],
    docs_tokens: &[Vec<S>],
    params: Bm25Params,
) -> Result<Vec<f64>, ScoreError> {
    if docs_tokens.is_empty() {
        return Err(ScoreError::EmptyCorpus);
    }
    let n = docs_tokens.len() as f64;
    let avgdl = docs_tokens.iter().map(Vec::len).sum::<usize>() as f64 / n;

    let query: BTreeSet<&str> = query_tokens.iter().map(AsRef::as_ref).collect();
    let tfs: Vec<HashMap<&str, usize>> = docs_tokens
        .iter()
        .map(|d| {
            let mut tf = HashMap::new();
            for t in d {
                let t = t.as_ref();
                if query.contains(t) {
                    *tf.entry(t).or_insert(0) += 1;
                }
            }
            tf
        })
        .collect();
    let idf: HashMap<&str, f64> = query
        .iter()
        .map(|&t| {
            let df = tfs.iter().filter(|tf| tf.contains_key(t)).count() as f64;
            (t, (1.0 + (n - df + 0.5) / (df + 0.5)).ln())
        })
        .collect();

    Ok(docs_tokens
        .iter()
        .zip(&tfs)
        .map(|(doc, tf)| {
            let len_norm = if avgdl > 0.0 { doc.len() as f64 / avgdl } else { 0.0 };
            tf.iter()
                .map(|(t, &f)| {
                    let f = f as f64;
                    idf[t] * f * (params.k1 + 1.0)
                        / (f + params.k1 * (1.0 - params.b + params.b * len_norm))
                })
                .fold(0.0, |acc, x| acc + x)
        })
        .collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, ScoreError> {
    if u.len() != v.len() {
        return Err(ScoreError::DimensionMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(ScoreError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Indices of the `k` best units, highest score first; ties favour the
/// lower index.
pub fn select_top_k(units: &[ScoredUnit], k: usize) -> Vec<usize> {
    let mut order: Vec<&ScoredUnit> = units.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.unit_index.cmp(&b.unit_index)));
    order.into_iter().take(k).map(|u| u.unit_index).collect()
}

/// `|A ∩ B| / |A|`.
pub fn overlap_fraction(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> Result<f64, ScoreError> {
    if a.is_empty() {
        return Err(ScoreError::EmptySelection);
    }
    Ok(a.intersection(b).count() as f64 / a.len() as f64)
}

/// Scores candidate passages of one question.
pub trait PassageScorer: Send + Sync {
    fn name(&self) -> String;

    /// One score per passage. `passages` is the full candidate set of a
    /// single question.
    fn score(&self, question: &str, passages: &[String]) -> Result<Vec<f64>, ScoreError>;

    /// Whether a passage's score depends on the other passages in the batch.
    fn collection_relative(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Default)]
pub struct Bm25Scorer {
    pub params: Bm25Params,
}

impl PassageScorer for Bm25Scorer {
    fn name(&self) -> String {
        "bm25".into()
    }

    fn score(&self, question: &str, passages: &[String]) -> Result<Vec<f64>, ScoreError> {
        let q = tokenize_words(question);
        let docs: Vec<Vec<String>> = passages.iter().map(|p| tokenize_words(p)).collect();
        bm25_scores(&q, &docs, self.params)
    }

    fn collection_relative(&self) -> bool {
        true
    }
}

/// Cross-encoder relevance via the backend `score` endpoint.
pub struct CrossEncoderScorer {
    pub backend: Arc<dyn Backend>,
    pub model_id: String,
}

impl PassageScorer for CrossEncoderScorer {
    fn name(&self) -> String {
        format!("cross_encoder:{}", self.model_id)
    }

    fn score(&self, question: &str, passages: &[String]) -> Result<Vec<f64>, ScoreError> {
        let pairs: Vec<(String, String)> = passages
            .iter()
            .map(|p| (question.to_string(), p.clone()))
            .collect();
        let logits = self.backend.score(&self.model_id, &pairs)?;
        if logits.len() != passages.len() {
            return Err(BackendError::Malformed(format!(
                "expected {} logits, got {}",
                passages.len(),
                logits.len()
            ))
            .into());
        }
        for &l in &logits {
            if !(0.0..=1.0).contains(&l) {
                return Err(ScoreError::OutOfRange(l));
            }
        }
        Ok(logits)
    }
}

/// Cosine between sentence embeddings of question and passage.
pub struct EmbedScorer {
    pub backend: Arc<dyn Backend>,
    pub model_id: String,
}

impl PassageScorer for EmbedScorer {
    fn name(&self) -> String {
        format!("embed:{}", self.model_id)
    }

    fn score(&self, question: &str, passages: &[String]) -> Result<Vec<f64>, ScoreError> {
        let mut texts = Vec::with_capacity(passages.len() + 1);
        texts.push(question.to_string());
        texts.extend_from_slice(passages);
        let vectors = self.backend.embed_sentences(&self.model_id, &texts)?;
        if vectors.len() != texts.len() {
            return Err(BackendError::Malformed("embedding count mismatch".into()).into());
        }
        vectors[1..].iter().map(|v| cosine(&vectors[0], v)).collect()
    }
}

/// Wraps a plain function of `(question, passage)`.
pub struct FnScorer<F>(pub F);

impl<F> PassageScorer for FnScorer<F>
where
    F: Fn(&str, &str) -> f64 + Send + Sync,
{
    fn name(&self) -> String {
        "fn".into()
    }

    fn score(&self, question: &str, passages: &[String]) -> Result<Vec<f64>, ScoreError> {
        Ok(passages.iter().map(|p| (self.0)(question, p)).collect())
    }
}

pub fn cross_encoder_score(
    question: &str,
    passage: &str,
    backend: Arc<dyn Backend>,
    model_id: &str,
) -> Result<f64, ScoreError> {
    let scorer = CrossEncoderScorer { backend, model_id: model_id.into() };
    Ok(scorer.score(question, &[passage.to_string()])?[0])
}

pub fn embed_score(
    question: &str,
    passage: &str,
    backend: Arc<dyn Backend>,
    model_id: &str,
) -> Result<f64, ScoreError> {
    let scorer = EmbedScorer { backend, model_id: model_id.into() };
    Ok(scorer.score(question, &[passage.to_string()])?[0])
}

pub fn as_set(indices: &[usize]) -> BTreeSet<usize> {
    indices.iter().copied().collect()
}
