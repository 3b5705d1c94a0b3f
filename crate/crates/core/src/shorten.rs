//! Context-shortening strategies.
//!
//! | kind | units scored and selected                                   |
//! |------|-------------------------------------------------------------|
//! | `B`  | none; the full context in paragraph order                   |
//! | `A1` | original paragraphs                                         |
//! | `A2` | one verbalized-triple paragraph per source paragraph        |
//! | `A3` | paragraphs after coreference rewriting                      |
//! | `A4` | verbalized triples grouped through coreference clusters     |
//!
//! Selected units are always emitted in document order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QaRecord;
use crate::scorer::{select_top_k, PassageScorer, ScoreError, ScoredUnit};
use crate::textproc::{group_triples_by_cluster, rewrite_with_coref, tokenize, verbalize_triple, TextError};

pub const UNIT_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShortenError {
    #[error("strategy {strategy} needs annotations that record `{record_id}` lacks")]
    MissingAnnotations { strategy: StrategyKind, record_id: String },
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    B,
    A1,
    A2,
    A3,
    A4,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::B,
        StrategyKind::A1,
        StrategyKind::A2,
        StrategyKind::A3,
        StrategyKind::A4,
    ];
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown strategy `{s}` (expected B, A1, A2, A3 or A4)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Answer-paragraph-selection cross-encoder behind the backend.
    #[serde(alias = "cross_encoder")]
    Aps,
    Bm25,
    Embed,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::Aps => "aps",
            ScorerKind::Bm25 => "bm25",
            ScorerKind::Embed => "embed",
        })
    }
}

impl FromStr for ScorerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aps" | "cross_encoder" => Ok(ScorerKind::Aps),
            "bm25" => Ok(ScorerKind::Bm25),
            "embed" => Ok(ScorerKind::Embed),
            other => Err(format!("unknown scorer `{other}` (expected aps, bm25 or embed)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub scorer_kind: ScorerKind,
    pub k: usize,
}

impl Strategy {
    pub fn new(kind: StrategyKind, scorer_kind: ScorerKind, k: usize) -> Self {
        Self { kind, scorer_kind, k: k.max(1) }
    }

    pub fn baseline() -> Self {
        Self::new(StrategyKind::B, ScorerKind::Aps, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitOrigin {
    Paragraph,
    VerbalizedTriples,
    RewrittenParagraph,
    TripleGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextUnit {
    pub text: String,
    pub origin: UnitOrigin,
    /// Paragraph index for paragraph-derived units, group id for triple groups.
    pub unit_index: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortContext {
    pub units: Vec<ContextUnit>,
    pub strategy: Strategy,
    pub token_count: usize,
}

impl ShortContext {
    fn new(units: Vec<ContextUnit>, strategy: Strategy) -> Self {
        let mut ctx = Self { units, strategy, token_count: 0 };
        ctx.token_count = tokenize(&ctx.text()).len();
        ctx
    }

    /// Unit texts joined by blank lines; this fills the prompt's context slot.
    pub fn text(&self) -> String {
        self.units
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(UNIT_SEPARATOR)
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.unit_index).collect()
    }
}

struct Candidate {
    text: String,
    origin: UnitOrigin,
    unit_index: usize,
}

/// Scores all candidates, keeps the top `k`, returns them in candidate order.
fn select(
    question: &str,
    candidates: Vec<Candidate>,
    scorer: &dyn PassageScorer,
    strategy: Strategy,
) -> Result<ShortContext, ShortenError> {
    let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
    let scores = scorer.score(question, &texts)?;
    let scored: Vec<ScoredUnit> = scores
        .iter()
        .enumerate()
        .map(|(pos, &score)| ScoredUnit { unit_index: pos, text: String::new(), score })
        .collect();
    let mut keep = select_top_k(&scored, strategy.k);
    keep.sort_unstable();
    let mut candidates: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    let units = keep
        .into_iter()
        .map(|pos| {
            let c = candidates[pos].take().expect("positions are unique");
            ContextUnit {
                text: c.text,
                origin: c.origin,
                unit_index: c.unit_index,
                score: Some(scores[pos]),
            }
        })
        .collect();
    Ok(ShortContext::new(units, strategy))
}

pub fn strategy_b(record: &QaRecord) -> ShortContext {
    let units = record
        .paragraphs
        .iter()
        .enumerate()
        .map(|(i, p)| ContextUnit {
            text: p.clone(),
            origin: UnitOrigin::Paragraph,
            unit_index: i,
            score: None,
        })
        .collect();
    ShortContext::new(units, Strategy::baseline())
}

pub fn strategy_a1(record: &QaRecord, scorer: &dyn PassageScorer, k: usize) -> Result<ShortContext, ShortenError> {
    let candidates = record
        .paragraphs
        .iter()
        .enumerate()
        .map(|(i, p)| Candidate { text: p.clone(), origin: UnitOrigin::Paragraph, unit_index: i })
        .collect();
    select(&record.question, candidates, scorer, strategy_for(StrategyKind::A1, scorer, k))
}

pub fn strategy_a2(record: &QaRecord, scorer: &dyn PassageScorer, k: usize) -> Result<ShortContext, ShortenError> {
    let triples = record.triples();
    if triples.is_empty() {
        return Err(missing(StrategyKind::A2, record));
    }
    let mut per_paragraph: Vec<Vec<String>> = vec![Vec::new(); record.paragraphs.len()];
    for t in triples {
        per_paragraph[t.paragraph_index].push(verbalize_triple(t));
    }
    let candidates = per_paragraph
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(i, v)| Candidate { text: v.join(" "), origin: UnitOrigin::VerbalizedTriples, unit_index: i })
        .collect();
    select(&record.question, candidates, scorer, strategy_for(StrategyKind::A2, scorer, k))
}

pub fn strategy_a3(record: &QaRecord, scorer: &dyn PassageScorer, k: usize) -> Result<ShortContext, ShortenError> {
    let annotations = record
        .annotations
        .as_ref()
        .ok_or_else(|| missing(StrategyKind::A3, record))?;
    let rewritten = rewrite_with_coref(&record.paragraphs, &annotations.clusters)?;
    let candidates = rewritten
        .into_iter()
        .zip(&record.paragraphs)
        .enumerate()
        .map(|(i, (new, old))| {
            let origin = if &new == old { UnitOrigin::Paragraph } else { UnitOrigin::RewrittenParagraph };
            Candidate { text: new, origin, unit_index: i }
        })
        .collect();
    select(&record.question, candidates, scorer, strategy_for(StrategyKind::A3, scorer, k))
}

pub fn strategy_a4(record: &QaRecord, scorer: &dyn PassageScorer, k: usize) -> Result<ShortContext, ShortenError> {
    let triples = record.triples();
    if triples.is_empty() {
        return Err(missing(StrategyKind::A4, record));
    }
    let groups = group_triples_by_cluster(triples, record.clusters(), &record.paragraphs);
    let candidates = groups
        .into_iter()
        .map(|g| Candidate {
            text: g
                .triple_indices
                .iter()
                .map(|&i| verbalize_triple(&triples[i]))
                .collect::<Vec<_>>()
                .join(" "),
            origin: UnitOrigin::TripleGroup,
            unit_index: g.group_id,
        })
        .collect();
    select(&record.question, candidates, scorer, strategy_for(StrategyKind::A4, scorer, k))
}

/// Dispatches on `strategy.kind`.
pub fn shorten(record: &QaRecord, strategy: Strategy, scorer: &dyn PassageScorer) -> Result<ShortContext, ShortenError> {
    let k = strategy.k.max(1);
    let mut ctx = match strategy.kind {
        StrategyKind::B => return Ok(strategy_b(record)),
        StrategyKind::A1 => strategy_a1(record, scorer, k)?,
        StrategyKind::A2 => strategy_a2(record, scorer, k)?,
        StrategyKind::A3 => strategy_a3(record, scorer, k)?,
        StrategyKind::A4 => strategy_a4(record, scorer, k)?,
    };
    ctx.strategy = strategy;
    Ok(ctx)
}

fn missing(strategy: StrategyKind, record: &QaRecord) -> ShortenError {
    ShortenError::MissingAnnotations { strategy, record_id: record.id.clone() }
}

fn strategy_for(kind: StrategyKind, scorer: &dyn PassageScorer, k: usize) -> Strategy {
    let scorer_kind = match scorer.name().as_str() {
        "bm25" => ScorerKind::Bm25,
        n if n.starts_with("embed") => ScorerKind::Embed,
        _ => ScorerKind::Aps,
    };
    Strategy::new(kind, scorer_kind, k)
}
