//! Answer evaluation: ROUGE-1/2/3/LCS, BERTScore-style token matching,
//! sentence-embedding cosines, STS-MuTe, and the run-level report figures.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::corpus::{Category, QaRecord};
use crate::scorer::{cosine, ScoreError};
use crate::shorten::StrategyKind;
use crate::textproc::{ngrams, tokenize_words};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("token set is empty")]
    EmptyTokenSet,
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("zero-length vector")]
    ZeroVector,
    #[error("harmonic mean undefined: component {component} is {value}")]
    HarmonicUndefined { component: &'static str, value: f64 },
    #[error("empty reference text")]
    EmptyReference,
    #[error("generated answer is empty")]
    EmptyHypothesis { rouge: RougeScores },
    #[error("no rows to aggregate")]
    EmptyRows,
    #[error("baseline value of `{0}` is zero")]
    DivisionByZeroMetric(String),
    #[error("the two row sets share no record ids")]
    NoCommonIds,
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("rows file: {0}")]
    Csv(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl From<ScoreError> for MetricError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::DimensionMismatch(a, b) => MetricError::DimensionMismatch(a, b),
            ScoreError::Backend(b) => MetricError::Backend(b),
            _ => MetricError::ZeroVector,
        }
    }
}

impl From<csv::Error> for MetricError {
    fn from(e: csv::Error) -> Self {
        MetricError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }

    fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        let ratio = |d: usize| if d == 0 { 0.0 } else { overlap as f64 / d as f64 };
        Self::new(ratio(hyp_total), ratio(ref_total))
    }
}

pub fn rouge_n<S: AsRef<str>>(reference: &[S], hypothesis: &[S], n: usize) -> Prf {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let r = ngrams(reference, n);
    let h = ngrams(hypothesis, n);
    let overlap = h
        .iter()
        .map(|(g, &c)| r.get(g).map_or(0, |&rc| rc.min(c)))
        .sum();
    Prf::from_counts(overlap, h.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_lcs<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Prf {
    Prf::from_counts(lcs_len(reference, hypothesis), hypothesis.len(), reference.len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: Prf,
    pub r2: Prf,
    pub r3: Prf,
    pub rl: Prf,
}

impl RougeScores {
    pub fn compute<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Self {
        Self {
            r1: rouge_n(reference, hypothesis, 1),
            r2: rouge_n(reference, hypothesis, 2),
            r3: rouge_n(reference, hypothesis, 3),
            rl: rouge_lcs(reference, hypothesis),
        }
    }

    pub fn mean_f1(&self) -> f64 {
        (self.r1.f1 + self.r2.f1 + self.r3.f1 + self.rl.f1) / 4.0
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>, MetricError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Greedy max-cosine matching in both directions; no idf, no rescaling.
pub fn bertscore(reference: &[Vec<f64>], hypothesis: &[Vec<f64>]) -> Result<Prf, MetricError> {
    if reference.is_empty() || hypothesis.is_empty() {
        return Err(MetricError::EmptyTokenSet);
    }
    let dim = reference[0].len();
    if let Some(bad) = reference.iter().chain(hypothesis).find(|v| v.len() != dim) {
        return Err(MetricError::DimensionMismatch(dim, bad.len()));
    }
    let r: Vec<Vec<f64>> = reference.iter().map(|v| unit(v)).collect::<Result<_, _>>()?;
    let h: Vec<Vec<f64>> = hypothesis.iter().map(|v| unit(v)).collect::<Result<_, _>>()?;
    let sim: Vec<Vec<f64>> = r
        .iter()
        .map(|a| {
            h.iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
                .collect()
        })
        .collect();
    let recall = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / r.len() as f64;
    let precision = (0..h.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / h.len() as f64;
    Ok(Prf::new(precision, recall))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanMode {
    #[default]
    Arithmetic,
    Harmonic,
}

pub const COMPONENT_NAMES: [&str; 4] = ["bertscore", "cos_use", "cos_labse", "cos_laser"];

/// Mean of the four STS-MuTe components, in `COMPONENT_NAMES` order.
pub fn combine_components(components: [f64; 4], mode: MeanMode) -> Result<f64, MetricError> {
    match mode {
        MeanMode::Arithmetic => Ok(components.iter().sum::<f64>() / 4.0),
        MeanMode::Harmonic => {
            if let Some((i, &v)) = components.iter().enumerate().find(|(_, &v)| v <= 0.0) {
                return Err(MetricError::HarmonicUndefined { component: COMPONENT_NAMES[i], value: v });
            }
            if components.iter().all(|&c| c == components[0]) {
                return Ok(components[0]);
            }
            Ok(4.0 / components.iter().map(|c| 1.0 / c).sum::<f64>())
        }
    }
}

/// Backend model ids used for the semantic metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticModels {
    pub use_model: String,
    pub labse_model: String,
    pub laser_model: String,
    pub token_model: String,
}

impl Default for SemanticModels {
    fn default() -> Self {
        Self {
            use_model: "use".into(),
            labse_model: "labse".into(),
            laser_model: "laser".into(),
            token_model: "mbert".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticScores {
    pub bertscore_f1: f64,
    pub cos_use: f64,
    pub cos_labse: f64,
    pub cos_laser: f64,
    pub sts_mute: f64,
}

pub fn sts_mute(
    reference: &str,
    hypothesis: &str,
    backend: &dyn Backend,
    models: &SemanticModels,
    mode: MeanMode,
) -> Result<SemanticScores, MetricError> {
    if reference.trim().is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if hypothesis.trim().is_empty() {
        return Err(MetricError::EmptyHypothesis { rouge: RougeScores::default() });
    }
    let texts = [reference.to_string(), hypothesis.to_string()];
    let mut cos = [0.0; 3];
    for (slot, model) in cos
        .iter_mut()
        .zip([&models.use_model, &models.labse_model, &models.laser_model])
    {
        let v = backend.embed_sentences(model, &texts)?;
        if v.len() != 2 {
            return Err(BackendError::Malformed(format!("expected 2 vectors from `{model}`")).into());
        }
        *slot = cosine(&v[0], &v[1])?;
    }
    let tok = backend.embed_tokens(&models.token_model, &texts)?;
    if tok.len() != 2 {
        return Err(BackendError::Malformed("expected 2 token embeddings".into()).into());
    }
    let bert = bertscore(&tok[0].vectors, &tok[1].vectors)?.f1;
    let sts = combine_components([bert, cos[0], cos[1], cos[2]], mode)?;
    Ok(SemanticScores {
        bertscore_f1: bert,
        cos_use: cos[0],
        cos_labse: cos[1],
        cos_laser: cos[2],
        sts_mute: sts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record_id: String,
    pub strategy: StrategyKind,
    pub category: Category,
    pub rouge: RougeScores,
    pub semantic: SemanticScores,
    pub answer_text: String,
}

impl EvalRow {
    pub fn summary(&self) -> MetricRow {
        MetricRow {
            record_id: self.record_id.clone(),
            strategy: self.strategy,
            category: self.category,
            r1: self.rouge.r1.f1,
            r2: self.rouge.r2.f1,
            r3: self.rouge.r3.f1,
            rl: self.rouge.rl.f1,
            bertscore: self.semantic.bertscore_f1,
            cos_use: self.semantic.cos_use,
            cos_labse: self.semantic.cos_labse,
            cos_laser: self.semantic.cos_laser,
            sts_mute: self.semantic.sts_mute,
        }
    }
}

pub fn evaluate_pair(
    record: &QaRecord,
    answer: &str,
    strategy: StrategyKind,
    backend: &dyn Backend,
    models: &SemanticModels,
    mode: MeanMode,
) -> Result<EvalRow, MetricError> {
    let reference = tokenize_words(&record.silver_answer);
    let hypothesis = tokenize_words(answer);
    let rouge = RougeScores::compute(&reference, &hypothesis);
    if hypothesis.is_empty() {
        return Err(MetricError::EmptyHypothesis { rouge });
    }
    let semantic = sts_mute(&record.silver_answer, answer, backend, models, mode)?;
    Ok(EvalRow {
        record_id: record.id.clone(),
        strategy,
        category: record.category,
        rouge,
        semantic,
        answer_text: answer.to_string(),
    })
}

pub const METRIC_NAMES: [&str; 9] = [
    "r1", "r2", "r3", "rl", "bertscore", "cos_use", "cos_labse", "cos_laser", "sts_mute",
];

/// One line of `rows.csv`: F1 values and semantic scores only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub record_id: String,
    pub strategy: StrategyKind,
    pub category: Category,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub rl: f64,
    pub bertscore: f64,
    pub cos_use: f64,
    pub cos_labse: f64,
    pub cos_laser: f64,
    pub sts_mute: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 9] {
        [
            self.r1, self.r2, self.r3, self.rl, self.bertscore, self.cos_use, self.cos_labse,
            self.cos_laser, self.sts_mute,
        ]
    }

    pub fn rouge_mean(&self) -> f64 {
        (self.r1 + self.r2 + self.r3 + self.rl) / 4.0
    }

    /// Ranking score for the best-k profile.
    pub fn overall(&self) -> f64 {
        (self.sts_mute + self.rouge_mean()) / 2.0
    }
}

fn sorted(rows: &[MetricRow]) -> Vec<&MetricRow> {
    let mut v: Vec<&MetricRow> = rows.iter().collect();
    v.sort_by(|a, b| a.strategy.cmp(&b.strategy).then_with(|| a.record_id.cmp(&b.record_id)));
    v
}

pub fn write_rows_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<(), MetricError> {
    let mut w = csv::Writer::from_writer(out);
    for row in sorted(rows) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| MetricError::Csv(e.to_string()))?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<MetricRow>, MetricError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(MetricError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub rows: usize,
    pub means: BTreeMap<String, f64>,
}

impl StrategyReport {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.means.get(metric).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub strategies: BTreeMap<StrategyKind, StrategyReport>,
}

/// Per-strategy arithmetic means, summed in record-id order.
pub fn aggregate(rows: &[MetricRow]) -> Result<Report, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::EmptyRows);
    }
    let mut sums: BTreeMap<StrategyKind, (usize, [f64; 9])> = BTreeMap::new();
    for row in sorted(rows) {
        let entry = sums.entry(row.strategy).or_insert((0, [0.0; 9]));
        entry.0 += 1;
        for (acc, v) in entry.1.iter_mut().zip(row.values()) {
            *acc += v;
        }
    }
    let strategies = sums
        .into_iter()
        .map(|(k, (n, s))| {
            let means = METRIC_NAMES
                .iter()
                .zip(s)
                .map(|(name, total)| (name.to_string(), total / n as f64))
                .collect();
            (k, StrategyReport { rows: n, means })
        })
        .collect();
    Ok(Report { strategies })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    /// `100 * (a - b) / b` per metric.
    pub per_metric: BTreeMap<String, f64>,
    pub semantic: f64,
    pub token: f64,
}

pub fn improvement(a: &StrategyReport, b: &StrategyReport) -> Result<Improvement, MetricError> {
    let mut per_metric = BTreeMap::new();
    for (name, &base) in &b.means {
        let Some(&new) = a.means.get(name) else { continue };
        if base == 0.0 {
            return Err(MetricError::DivisionByZeroMetric(name.clone()));
        }
        per_metric.insert(name.clone(), 100.0 * (new - base) / base);
    }
    let get = |m: &str| {
        per_metric
            .get(m)
            .copied()
            .ok_or_else(|| MetricError::DivisionByZeroMetric(m.to_string()))
    };
    let semantic = get("sts_mute")?;
    let token = (get("r1")? + get("r2")? + get("r3")? + get("rl")?) / 4.0;
    Ok(Improvement { per_metric, semantic, token })
}

/// Share of common record ids where `a` beats `b` strictly, as
/// `(pct_sts, pct_rouge)`.
pub fn common_superiority(rows_a: &[MetricRow], rows_b: &[MetricRow]) -> Result<(f64, f64), MetricError> {
    let b: HashMap<&str, &MetricRow> = rows_b.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let (mut common, mut sts, mut rouge) = (0usize, 0usize, 0usize);
    for ra in rows_a {
        let Some(rb) = b.get(ra.record_id.as_str()) else { continue };
        common += 1;
        sts += usize::from(ra.sts_mute > rb.sts_mute);
        rouge += usize::from(ra.rouge_mean() > rb.rouge_mean());
    }
    if common == 0 {
        return Err(MetricError::NoCommonIds);
    }
    let pct = |n: usize| 100.0 * n as f64 / common as f64;
    Ok((pct(sts), pct(rouge)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: Category,
    pub total_pct: f64,
    pub best_k_pct: f64,
}

/// Category mix of all rows versus the `k` rows with the best overall score.
pub fn best_k_category_profile(rows: &[MetricRow], k: usize) -> Result<Vec<CategoryShare>, MetricError> {
    if k == 0 || rows.len() < k {
        return Err(MetricError::TooFewRows { needed: k.max(1), got: rows.len() });
    }
    let mut ranked: Vec<&MetricRow> = rows.iter().collect();
    ranked.sort_by(|a, b| {
        b.overall()
            .total_cmp(&a.overall())
            .then_with(|| a.record_id.cmp(&b.record_id))
    });
    let count = |rs: &[&MetricRow], c: Category| rs.iter().filter(|r| r.category == c).count() as f64;
    Ok(Category::ALL
        .iter()
        .map(|&c| CategoryShare {
            category: c,
            total_pct: 100.0 * count(&ranked, c) / rows.len() as f64,
            best_k_pct: 100.0 * count(&ranked[..k], c) / k as f64,
        })
        .collect())
}

/// Rounds half toward positive infinity at `decimals` places.
///
/// The small nudge absorbs binary representation error, so 60.65 rounds to
/// 60.7 even though its nearest double is slightly below.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let s = x * scale;
    (s + 0.5 + 1e-9 * s.abs().max(1.0)).floor() / scale
}

/// A category cell: all rows, best-k of the base model, best-k of the fine-tuned model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryCell {
    pub total: f64,
    pub best_base: f64,
    pub best_finetuned: f64,
}

impl fmt::Display for CategoryCell {
    /// `"30 vs 28 (32)"`, each share rounded half-up to a whole percent.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} vs {} ({})",
            round_half_up(self.total, 0),
            round_half_up(self.best_base, 0),
            round_half_up(self.best_finetuned, 0)
        )
    }
}

impl std::str::FromStr for CategoryCell {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed cell `{s}`");
        let (total, rest) = s.split_once(" vs ").ok_or_else(bad)?;
        let (base, ft) = rest.split_once(" (").ok_or_else(bad)?;
        let ft = ft.strip_suffix(')').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        Ok(Self { total: num(total)?, best_base: num(base)?, best_finetuned: num(ft)? })
    }
}
