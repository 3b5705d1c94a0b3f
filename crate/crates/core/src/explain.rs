//! Perturbation-based token rationales for passage scorers, and the
//! logit-bucket coverage analysis over a set of rationales.
//!
//! Masking removes the masked tokens from the passage text; everything between
//! tokens (spacing, punctuation) that is not part of a masked token is kept.

use std::collections::HashMap;
use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scorer::{PassageScorer, ScoreError};
use crate::textproc::{tokenize, Token};

pub const SLOW_RATIONALE: Duration = Duration::from_secs(15);
pub const EXACT_SHAPLEY_MAX_TOKENS: usize = 6;
pub const DEFAULT_PERMUTATIONS: usize = 200;
pub const DEFAULT_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const SCORE_BATCH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("passage has no tokens")]
    EmptyPassage,
    #[error("all perturbation masks are identical")]
    DegenerateSamples,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("regression system is singular")]
    Singular,
    #[error("scorer failure: {0}")]
    Scorer(#[from] ScoreError),
    #[error("no rationales given")]
    EmptyInput,
    #[error("need at least two occupied buckets, found {0}")]
    TooFewBuckets(usize),
    #[error("coverage file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Surrogate,
    Shapley,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub tokens: Vec<String>,
    pub relevances: Vec<f64>,
    /// The scorer's output on the unperturbed passage.
    pub logit: f64,
    pub method: Method,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub n_samples: usize,
    pub mask_prob: f64,
    pub kernel_width: f64,
    pub ridge: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self { n_samples: 2000, mask_prob: 0.3, kernel_width: 0.25, ridge: 1e-3 }
    }
}

impl SurrogateParams {
    fn validate(&self) -> Result<(), ExplainError> {
        if self.n_samples < 2 {
            return Err(ExplainError::InvalidParams("n_samples must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(ExplainError::InvalidParams("mask_prob must lie in [0, 1)".into()));
        }
        if !(self.kernel_width > 0.0) || !(self.ridge >= 0.0) {
            return Err(ExplainError::InvalidParams("kernel_width must be positive, ridge non-negative".into()));
        }
        Ok(())
    }
}

/// `true` keeps the token.
pub type Mask = Vec<bool>;

/// The passage with masked tokens cut out.
pub fn masked_text(source: &str, tokens: &[Token], mask: &[bool]) -> String {
    let mut out = String::with_capacity(source.len());
    let mut cursor = 0;
    for (t, &keep) in tokens.iter().zip(mask) {
        if !keep {
            out.push_str(&source[cursor..t.byte_range.start]);
            cursor = t.byte_range.end;
        }
    }
    out.push_str(&source[cursor..]);
    out
}

/// Evaluates distinct masks once each, in batches of `SCORE_BATCH`.
fn evaluate<F>(masks: &[Mask], value: &mut F) -> Result<Vec<f64>, ExplainError>
where
    F: FnMut(&[Mask]) -> Result<Vec<f64>, ExplainError>,
{
    let mut index: HashMap<&Mask, usize> = HashMap::new();
    let mut distinct: Vec<Mask> = Vec::new();
    let slots: Vec<usize> = masks
        .iter()
        .map(|m| {
            *index.entry(m).or_insert_with(|| {
                distinct.push(m.clone());
                distinct.len() - 1
            })
        })
        .collect();
    let mut values = Vec::with_capacity(distinct.len());
    for chunk in distinct.chunks(SCORE_BATCH) {
        let v = value(chunk)?;
        if v.len() != chunk.len() {
            return Err(ScoreError::Backend(crate::backend::BackendError::Malformed(
                "score count mismatch".into(),
            ))
            .into());
        }
        values.extend(v);
    }
    Ok(slots.into_iter().map(|s| values[s]).collect())
}

/// Weighted ridge surrogate over `n` binary features.
///
/// Sample 0 keeps every token; sample `i` draws from its own ChaCha stream,
/// so the mask set does not depend on scheduling. A single feature is solved
/// exactly from its two possible masks.
pub fn surrogate_attributions<F>(n: usize, mut value: F, params: &SurrogateParams, seed: u64) -> Result<Vec<f64>, ExplainError>
where
    F: FnMut(&[Mask]) -> Result<Vec<f64>, ExplainError>,
{
    params.validate()?;
    if n == 0 {
        return Err(ExplainError::EmptyPassage);
    }
    if n == 1 {
        let v = evaluate(&[vec![true], vec![false]], &mut value)?;
        return Ok(vec![v[0] - v[1]]);
    }
    let masks: Vec<Mask> = (0..params.n_samples)
        .map(|i| {
            if i == 0 {
                return vec![true; n];
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (0..n).map(|_| !rng.gen_bool(params.mask_prob)).collect()
        })
        .collect();
    if masks.iter().all(|m| m == &masks[0]) {
        return Err(ExplainError::DegenerateSamples);
    }
    let y = evaluate(&masks, &mut value)?;
    let w: Vec<f64> = masks
        .iter()
        .map(|m| {
            let d = m.iter().filter(|&&k| !k).count() as f64 / n as f64;
            (-(d * d) / (params.kernel_width * params.kernel_width)).exp()
        })
        .collect();
    weighted_ridge(&masks, &y, &w, params.ridge)
}

/// Ridge with an unpenalized intercept, solved on weighted-centered data.
fn weighted_ridge(masks: &[Mask], y: &[f64], w: &[f64], lambda: f64) -> Result<Vec<f64>, ExplainError> {
    let n = masks[0].len();
    let m = masks.len();
    let wsum: f64 = w.iter().sum();
    let x = DMatrix::from_fn(m, n, |r, c| if masks[r][c] { 1.0 } else { 0.0 });
    let x_mean: Vec<f64> = (0..n)
        .map(|c| (0..m).map(|r| w[r] * x[(r, c)]).sum::<f64>() / wsum)
        .collect();
    let y_mean = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / wsum;
    let xc = DMatrix::from_fn(m, n, |r, c| (x[(r, c)] - x_mean[c]) * w[r].sqrt());
    let yc = DVector::from_fn(m, |r, _| (y[r] - y_mean) * w[r].sqrt());
    let mut gram = xc.transpose() * &xc;
    for i in 0..n {
        gram[(i, i)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let beta = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs).ok_or(ExplainError::Singular)?,
    };
    Ok(beta.iter().copied().collect())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Mean marginal contribution over permutations: every permutation when
/// `n <= EXACT_SHAPLEY_MAX_TOKENS`, otherwise `n_permutations` seeded shuffles.
pub fn shapley_attributions<F>(n: usize, mut value: F, n_permutations: usize, seed: u64) -> Result<Vec<f64>, ExplainError>
where
    F: FnMut(&[Mask]) -> Result<Vec<f64>, ExplainError>,
{
    if n == 0 {
        return Err(ExplainError::EmptyPassage);
    }
    let perms = if n <= EXACT_SHAPLEY_MAX_TOKENS {
        permutations(n)
    } else {
        if n_permutations == 0 {
            return Err(ExplainError::InvalidParams("n_permutations must be at least 1".into()));
        }
        (0..n_permutations)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut p: Vec<usize> = (0..n).collect();
                for j in (1..n).rev() {
                    p.swap(j, rng.gen_range(0..=j));
                }
                p
            })
            .collect()
    };
    // Coalition chain of each permutation: prefixes of length 0..=n.
    let mut masks = Vec::with_capacity(perms.len() * (n + 1));
    for p in &perms {
        let mut m = vec![false; n];
        masks.push(m.clone());
        for &i in p {
            m[i] = true;
            masks.push(m.clone());
        }
    }
    let v = evaluate(&masks, &mut value)?;
    let mut phi = vec![0.0; n];
    for (k, p) in perms.iter().enumerate() {
        let base = k * (n + 1);
        for (step, &i) in p.iter().enumerate() {
            phi[i] += v[base + step + 1] - v[base + step];
        }
    }
    let count = perms.len() as f64;
    Ok(phi.into_iter().map(|x| x / count).collect())
}

fn passage_value<'a>(
    question: &'a str,
    passage: &'a str,
    tokens: &'a [Token],
    scorer: &'a dyn PassageScorer,
) -> impl FnMut(&[Mask]) -> Result<Vec<f64>, ExplainError> + 'a {
    move |masks: &[Mask]| {
        let texts: Vec<String> = masks.iter().map(|m| masked_text(passage, tokens, m)).collect();
        if scorer.collection_relative() {
            texts
                .iter()
                .map(|t| Ok(scorer.score(question, std::slice::from_ref(t))?[0]))
                .collect()
        } else {
            Ok(scorer.score(question, &texts)?)
        }
    }
}

fn finish(
    tokens: Vec<Token>,
    relevances: Vec<f64>,
    logit: f64,
    method: Method,
    seed: u64,
    started: Instant,
) -> Rationale {
    let elapsed = started.elapsed();
    if elapsed > SLOW_RATIONALE {
        log::warn!("{method:?} rationale took {:.1}s", elapsed.as_secs_f64());
    }
    Rationale {
        tokens: tokens.into_iter().map(|t| t.text).collect(),
        relevances,
        logit,
        method,
        seed,
    }
}

fn unperturbed(question: &str, passage: &str, scorer: &dyn PassageScorer) -> Result<f64, ExplainError> {
    Ok(scorer.score(question, &[passage.to_string()])?[0])
}

pub fn surrogate_rationale(
    question: &str,
    passage: &str,
    scorer: &dyn PassageScorer,
    params: &SurrogateParams,
    seed: u64,
) -> Result<Rationale, ExplainError> {
    let started = Instant::now();
    let tokens = tokenize(passage);
    let relevances = surrogate_attributions(tokens.len(), passage_value(question, passage, &tokens, scorer), params, seed)?;
    let logit = unperturbed(question, passage, scorer)?;
    Ok(finish(tokens, relevances, logit, Method::Surrogate, seed, started))
}

pub fn shapley_rationale(
    question: &str,
    passage: &str,
    scorer: &dyn PassageScorer,
    n_permutations: usize,
    seed: u64,
) -> Result<Rationale, ExplainError> {
    let started = Instant::now();
    let tokens = tokenize(passage);
    let relevances = shapley_attributions(tokens.len(), passage_value(question, passage, &tokens, scorer), n_permutations, seed)?;
    let logit = unperturbed(question, passage, scorer)?;
    Ok(finish(tokens, relevances, logit, Method::Shapley, seed, started))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageBucket {
    /// Lower edge in percent: 0, 10, ..., 90. The last bucket includes 100.
    pub lower: u32,
    pub count: usize,
    /// One cell per threshold; `None` when the bucket is empty.
    pub cells: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMatrix {
    pub thresholds: Vec<f64>,
    pub buckets: Vec<CoverageBucket>,
}

impl CoverageMatrix {
    pub fn cell(&self, bucket_lower: u32, threshold: f64) -> Option<f64> {
        let t = self.thresholds.iter().position(|&x| (x - threshold).abs() < 1e-12)?;
        let b = self.buckets.iter().find(|b| b.lower == bucket_lower)?;
        b.cells.as_ref().map(|c| c[t])
    }
}

pub fn bucket_of(logit: f64) -> usize {
    ((logit * 10.0 + 1e-9).floor().max(0.0) as usize).min(9)
}

/// Relevances scaled by their largest magnitude; all-zero stays zero.
pub fn normalize_max_abs(relevances: &[f64]) -> Vec<f64> {
    let max = relevances.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if max == 0.0 {
        return vec![0.0; relevances.len()];
    }
    relevances.iter().map(|r| r / max).collect()
}

pub fn coverage_matrix(rationales: &[Rationale], thresholds: &[f64]) -> Result<CoverageMatrix, ExplainError> {
    if rationales.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    if thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(ExplainError::InvalidParams("thresholds must lie in (0, 1)".into()));
    }
    let mut sums = vec![vec![0.0; thresholds.len()]; 10];
    let mut counts = [0usize; 10];
    for r in rationales {
        if r.relevances.is_empty() {
            continue;
        }
        let b = bucket_of(r.logit);
        counts[b] += 1;
        let norm = normalize_max_abs(&r.relevances);
        for (cell, &t) in sums[b].iter_mut().zip(thresholds) {
            let above = norm.iter().filter(|&&x| x > t).count();
            *cell += 100.0 * above as f64 / norm.len() as f64;
        }
    }
    let buckets = (0..10)
        .map(|b| CoverageBucket {
            lower: b as u32 * 10,
            count: counts[b],
            cells: (counts[b] > 0).then(|| sums[b].iter().map(|s| s / counts[b] as f64).collect()),
        })
        .collect();
    Ok(CoverageMatrix { thresholds: thresholds.to_vec(), buckets })
}

/// Per threshold: are cell values non-decreasing across occupied buckets?
pub fn coverage_trend_check(matrix: &CoverageMatrix) -> Result<Vec<bool>, ExplainError> {
    let occupied: Vec<&Vec<f64>> = matrix.buckets.iter().filter_map(|b| b.cells.as_ref()).collect();
    if occupied.len() < 2 {
        return Err(ExplainError::TooFewBuckets(occupied.len()));
    }
    Ok((0..matrix.thresholds.len())
        .map(|t| occupied.windows(2).all(|w| w[1][t] >= w[0][t] - 1e-9))
        .collect())
}

/// Rows are buckets, columns thresholds; empty buckets leave cells blank.
pub fn write_coverage_csv<W: Write>(out: W, matrix: &CoverageMatrix) -> Result<(), ExplainError> {
    let io = |e: csv::Error| ExplainError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["bucket".to_string(), "count".to_string()];
    header.extend(matrix.thresholds.iter().map(|t| format!("{t}")));
    w.write_record(&header).map_err(io)?;
    for b in &matrix.buckets {
        let upper = if b.lower == 90 { "100]".to_string() } else { format!("{})", b.lower + 10) };
        let mut rec = vec![format!("[{},{upper}", b.lower), b.count.to_string()];
        match &b.cells {
            Some(cells) => rec.extend(cells.iter().map(|c| format!("{c}"))),
            None => rec.extend(std::iter::repeat(String::new()).take(matrix.thresholds.len())),
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| ExplainError::Io(e.to_string()))
}
