//! Dataset loading, annotation attachment and corpus statistics.
//!
//! Datasets are JSON Lines files, one question per line:
//!
//! ```text
//! {"id": "hi-0001", "language": "hi", "question": "...", "category": "Reason",
//!  "paragraphs": ["...", "..."], "silver_answer": "...", "split": "test"}
//! ```
//!
//! Open information extraction triples and coreference clusters are read
//! from separate precomputed JSON Lines files and attached to records by id.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::textproc::tokenize;

/// Contexts with strictly more tokens than this are "long".
pub const LONG_CONTEXT_THRESHOLD: usize = 512;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: record has no paragraphs")]
    EmptyContext { line: usize },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: test record has an empty silver answer")]
    EmptySilverAnswer { line: usize },
    #[error("invalid language code `{0}`")]
    InvalidLanguage(String),
    #[error("annotation references unknown record id `{0}`")]
    UnresolvedRecordId(String),
    #[error("record `{record_id}`: paragraph index {paragraph_index} out of bounds")]
    ParagraphOutOfBounds {
        record_id: String,
        paragraph_index: usize,
    },
    #[error("record `{record_id}`: cluster {cluster_id} has a span outside its paragraph")]
    SpanOutOfBounds { record_id: String, cluster_id: i64 },
    #[error("record `{record_id}`: cluster {cluster_id} has fewer than two mentions")]
    ClusterTooSmall { record_id: String, cluster_id: i64 },
    #[error("line {line}: triple has an empty slot")]
    EmptyTripleSlot { line: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Lowercase ISO 639-1 or 639-3 language code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub const HINDI: &'static str = "hi";
    pub const TAMIL: &'static str = "ta";
    pub const TELUGU: &'static str = "te";
    pub const URDU: &'static str = "ur";

    pub fn new(code: &str) -> Result<Self, CorpusError> {
        let code = code.trim().to_ascii_lowercase();
        let ok = (2..=3).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase());
        if ok {
            Ok(Self(code))
        } else {
            Err(CorpusError::InvalidLanguage(code))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = CorpusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(&value)
    }
}

impl From<LanguageCode> for String {
    fn from(value: LanguageCode) -> Self {
        value.0
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Question category as annotated in the source dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Factoid,
    #[serde(rename = "Evidence-Based")]
    EvidenceBased,
    Debate,
    Reason,
    Experience,
    Unknown,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Factoid,
        Category::EvidenceBased,
        Category::Debate,
        Category::Reason,
        Category::Experience,
        Category::Unknown,
    ];

    /// Lenient parse; anything unrecognised maps to `Unknown`.
    pub fn parse(raw: &str) -> Self {
        let norm: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match norm.as_str() {
            "factoid" => Category::Factoid,
            "evidencebased" | "evidence" => Category::EvidenceBased,
            "debate" => Category::Debate,
            "reason" => Category::Reason,
            "experience" => Category::Experience,
            _ => Category::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Factoid => "Factoid",
            Category::EvidenceBased => "Evidence-Based",
            Category::Debate => "Debate",
            Category::Reason => "Reason",
            Category::Experience => "Experience",
            Category::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripleSource {
    Indie,
    Gen2oie,
    Other,
}

impl TripleSource {
    fn parse(raw: &str) -> Self {
        match raw.trim().to_ascii_lowercase().as_str() {
            "indie" => TripleSource::Indie,
            "gen2oie" => TripleSource::Gen2oie,
            _ => TripleSource::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub record_id: String,
    pub paragraph_index: usize,
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source: TripleSource,
}

impl TripleRecord {
    pub fn new(
        record_id: impl Into<String>,
        paragraph_index: usize,
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        Self {
            record_id: record_id.into(),
            paragraph_index,
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            source: TripleSource::Other,
        }
    }

    pub fn slots(&self) -> [&str; 3] {
        [&self.head, &self.relation, &self.tail]
    }
}

/// A mention span: paragraph index and a half-open character range.
///
/// Offsets count Unicode scalar values, not bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub paragraph_index: usize,
    pub char_start: usize,
    pub char_end: usize,
}

/// Wire form of a mention: `[paragraph_index, char_start, char_end]`.
#[derive(Debug, Clone, Copy)]
struct MentionTuple(Mention);

impl Serialize for MentionTuple {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (self.0.paragraph_index, self.0.char_start, self.0.char_end).serialize(s)
    }
}

impl<'de> Deserialize<'de> for MentionTuple {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (paragraph_index, char_start, char_end) = <(usize, usize, usize)>::deserialize(d)?;
        Ok(MentionTuple(Mention {
            paragraph_index,
            char_start,
            char_end,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorefClusterRecord {
    pub record_id: String,
    pub cluster_id: i64,
    #[serde(
        serialize_with = "ser_mentions",
        deserialize_with = "de_mentions"
    )]
    pub mentions: Vec<Mention>,
}

fn ser_mentions<S: serde::Serializer>(m: &[Mention], s: S) -> Result<S::Ok, S::Error> {
    let tuples: Vec<MentionTuple> = m.iter().copied().map(MentionTuple).collect();
    tuples.serialize(s)
}

fn de_mentions<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<Mention>, D::Error> {
    let tuples = Vec::<MentionTuple>::deserialize(d)?;
    Ok(tuples.into_iter().map(|t| t.0).collect())
}

/// Precomputed annotations attached to a record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub triples: Vec<TripleRecord>,
    pub clusters: Vec<CorefClusterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub language: LanguageCode,
    pub question: String,
    pub category: Category,
    pub paragraphs: Vec<String>,
    pub silver_answer: String,
    pub split: Split,
    /// `None` until [`attach_annotations`] has run.
    #[serde(skip)]
    pub annotations: Option<Annotations>,
}

impl QaRecord {
    /// Total token count over all paragraphs.
    pub fn context_tokens(&self) -> usize {
        self.paragraphs.iter().map(|p| tokenize(p).len()).sum()
    }

    pub fn triples(&self) -> &[TripleRecord] {
        self.annotations.as_ref().map_or(&[], |a| &a.triples)
    }

    pub fn clusters(&self) -> &[CorefClusterRecord] {
        self.annotations.as_ref().map_or(&[], |a| &a.clusters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextLength {
    Long,
    Short,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub record_count: usize,
    pub mean_context_tokens: f64,
    pub long_context_fraction: f64,
    pub per_language: BTreeMap<LanguageCode, usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads non-blank lines as JSON objects, yielding (1-based line number, object).
fn read_json_lines(path: &Path) -> Result<Vec<(usize, serde_json::Map<String, Value>)>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(map)) => out.push((line_no, map)),
            Ok(_) => {
                return Err(CorpusError::MalformedLine {
                    line: line_no,
                    reason: "expected a JSON object".into(),
                })
            }
            Err(e) => {
                return Err(CorpusError::MalformedLine {
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn field<'a>(
    obj: &'a serde_json::Map<String, Value>,
    line: usize,
    name: &'static str,
) -> Result<&'a Value, CorpusError> {
    obj.get(name)
        .filter(|v| !v.is_null())
        .ok_or(CorpusError::MissingField { line, field: name })
}

fn str_field<'a>(
    obj: &'a serde_json::Map<String, Value>,
    line: usize,
    name: &'static str,
) -> Result<&'a str, CorpusError> {
    field(obj, line, name)?
        .as_str()
        .ok_or_else(|| CorpusError::MalformedLine {
            line,
            reason: format!("field `{name}` must be a string"),
        })
}

fn usize_field(
    obj: &serde_json::Map<String, Value>,
    line: usize,
    name: &'static str,
) -> Result<usize, CorpusError> {
    field(obj, line, name)?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| CorpusError::MalformedLine {
            line,
            reason: format!("field `{name}` must be a non-negative integer"),
        })
}

fn parse_record(line: usize, obj: &serde_json::Map<String, Value>) -> Result<QaRecord, CorpusError> {
    let id = str_field(obj, line, "id")?.to_string();
    let language = LanguageCode::new(str_field(obj, line, "language")?)?;
    let question = str_field(obj, line, "question")?.to_string();
    let category = Category::parse(str_field(obj, line, "category")?);
    let paragraphs = field(obj, line, "paragraphs")?
        .as_array()
        .ok_or_else(|| CorpusError::MalformedLine {
            line,
            reason: "field `paragraphs` must be an array".into(),
        })?
        .iter()
        .map(|p| {
            p.as_str().map(str::to_string).ok_or_else(|| CorpusError::MalformedLine {
                line,
                reason: "paragraphs must be strings".into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let silver_answer = str_field(obj, line, "silver_answer")?.to_string();
    let split = match str_field(obj, line, "split")?.trim().to_ascii_lowercase().as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(CorpusError::MalformedLine {
                line,
                reason: format!("unknown split `{other}`"),
            })
        }
    };
    if paragraphs.is_empty() {
        return Err(CorpusError::EmptyContext { line });
    }
    if split == Split::Test && silver_answer.trim().is_empty() {
        return Err(CorpusError::EmptySilverAnswer { line });
    }
    Ok(QaRecord {
        id,
        language,
        question,
        category,
        paragraphs,
        silver_answer,
        split,
        annotations: None,
    })
}

/// Loads and validates a dataset file, preserving file order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QaRecord>, CorpusError> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (line, obj) in read_json_lines(path)? {
        let record = parse_record(line, &obj)?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records in the dataset line format (annotations are not included).
pub fn write_dataset(path: impl AsRef<Path>, records: &[QaRecord]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn classify_context_length(record: &QaRecord, threshold: usize) -> ContextLength {
    classify_token_count(record.context_tokens(), threshold)
}

pub fn classify_token_count(tokens: usize, threshold: usize) -> ContextLength {
    if tokens > threshold {
        ContextLength::Long
    } else {
        ContextLength::Short
    }
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<Vec<TripleRecord>, CorpusError> {
    let path = path.as_ref();
    read_json_lines(path)?
        .into_iter()
        .map(|(line, obj)| {
            let triple = TripleRecord {
                record_id: str_field(&obj, line, "record_id")?.to_string(),
                paragraph_index: usize_field(&obj, line, "paragraph_index")?,
                head: str_field(&obj, line, "head")?.to_string(),
                relation: str_field(&obj, line, "relation")?.to_string(),
                tail: str_field(&obj, line, "tail")?.to_string(),
                source: TripleSource::parse(str_field(&obj, line, "source")?),
            };
            if triple.slots().iter().any(|s| s.trim().is_empty()) {
                return Err(CorpusError::EmptyTripleSlot { line });
            }
            Ok(triple)
        })
        .collect()
}

pub fn load_coref(path: impl AsRef<Path>) -> Result<Vec<CorefClusterRecord>, CorpusError> {
    let path = path.as_ref();
    read_json_lines(path)?
        .into_iter()
        .map(|(line, obj)| {
            for name in ["record_id", "cluster_id", "mentions"] {
                field(&obj, line, name)?;
            }
            serde_json::from_value(Value::Object(obj)).map_err(|e| CorpusError::MalformedLine {
                line,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Attaches annotation files to records. Either file may be absent, in which
/// case every record gets an empty list for that annotation kind.
pub fn attach_annotations(
    records: Vec<QaRecord>,
    triples_path: Option<&Path>,
    coref_path: Option<&Path>,
) -> Result<Vec<QaRecord>, CorpusError> {
    let triples = triples_path.map(load_triples).transpose()?.unwrap_or_default();
    let clusters = coref_path.map(load_coref).transpose()?.unwrap_or_default();
    attach_annotation_lists(records, triples, clusters)
}

/// In-memory form of [`attach_annotations`].
pub fn attach_annotation_lists(
    mut records: Vec<QaRecord>,
    triples: Vec<TripleRecord>,
    clusters: Vec<CorefClusterRecord>,
) -> Result<Vec<QaRecord>, CorpusError> {
    let index: HashMap<String, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    for r in records.iter_mut() {
        r.annotations = Some(Annotations::default());
    }

    for t in triples {
        let &i = index
            .get(&t.record_id)
            .ok_or_else(|| CorpusError::UnresolvedRecordId(t.record_id.clone()))?;
        let record = &mut records[i];
        if t.paragraph_index >= record.paragraphs.len() {
            return Err(CorpusError::ParagraphOutOfBounds {
                record_id: t.record_id,
                paragraph_index: t.paragraph_index,
            });
        }
        record.annotations.as_mut().unwrap().triples.push(t);
    }

    for c in clusters {
        let &i = index
            .get(&c.record_id)
            .ok_or_else(|| CorpusError::UnresolvedRecordId(c.record_id.clone()))?;
        let record = &mut records[i];
        if c.mentions.len() < 2 {
            return Err(CorpusError::ClusterTooSmall {
                record_id: c.record_id,
                cluster_id: c.cluster_id,
            });
        }
        let in_bounds = c.mentions.iter().all(|m| {
            record
                .paragraphs
                .get(m.paragraph_index)
                .is_some_and(|p| m.char_start < m.char_end && m.char_end <= p.chars().count())
        });
        if !in_bounds {
            return Err(CorpusError::SpanOutOfBounds {
                record_id: c.record_id,
                cluster_id: c.cluster_id,
            });
        }
        record.annotations.as_mut().unwrap().clusters.push(c);
    }
    Ok(records)
}

pub fn corpus_stats(records: &[QaRecord]) -> Result<CorpusStats, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut total = 0usize;
    let mut long = 0usize;
    let mut per_language = BTreeMap::new();
    for r in records {
        let n = r.context_tokens();
        total += n;
        if classify_token_count(n, LONG_CONTEXT_THRESHOLD) == ContextLength::Long {
            long += 1;
        }
        *per_language.entry(r.language.clone()).or_insert(0) += 1;
    }
    let count = records.len() as f64;
    Ok(CorpusStats {
        record_count: records.len(),
        mean_context_tokens: total as f64 / count,
        long_context_fraction: long as f64 / count,
        per_language,
    })
}
