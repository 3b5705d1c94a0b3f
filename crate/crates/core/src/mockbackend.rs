//! Deterministic in-process backend.
//!
//! Embeddings are derived from SHA-256 of the text, scores are either planted
//! per `(record_id, unit_index)` or hashed, and generation echoes the
//! `##Context` slice of the QA prompt. Judge prompts are answered by a
//! configurable rule. Nothing here models real semantics.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{wire, Backend, BackendError, ModelKind, ModelRegistryEntry, Pooling, TokenEmbedding};
use crate::corpus::QaRecord;
use crate::genclient::{
    GenerationRequest, ANSWER_HEADER, CONTEXT_HEADER, JUDGE_INSTRUCTION, OPTION1_HEADER, OPTION2_HEADER,
};
use crate::textproc::tokenize;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("score plan value {score} for ({record_id}, {unit_index}) is outside [0, 1]")]
    PlanOutOfRange {
        record_id: String,
        unit_index: usize,
        score: f64,
    },
    #[error("score plan references unknown unit ({record_id}, {unit_index})")]
    UnknownPlanUnit { record_id: String, unit_index: usize },
    #[error("embed_dim must be at least 1")]
    ZeroDim,
    #[error("invalid mock config: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    #[default]
    EchoContext,
    FixedText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    #[default]
    AlwaysOption1,
    /// Picks the option with more characters; ties go to option1.
    PreferLonger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub record_id: String,
    pub unit_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub generator_mode: GeneratorMode,
    pub fixed_text: String,
    pub judge_mode: JudgeMode,
    /// Prompts with more tokens than this are refused as too long.
    pub max_prompt_tokens: Option<usize>,
    pub score_plan: Vec<PlanEntry>,
    /// When non-empty, unplanned passages score `weight × (keyword tokens)`,
    /// clamped to 1, instead of a hash.
    pub score_keywords: Vec<String>,
    pub score_keyword_weight: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            embed_dim: 16,
            generator_mode: GeneratorMode::EchoContext,
            fixed_text: String::new(),
            judge_mode: JudgeMode::AlwaysOption1,
            max_prompt_tokens: None,
            score_plan: Vec::new(),
            score_keywords: Vec::new(),
            score_keyword_weight: 0.1,
        }
    }
}

impl MockConfig {
    pub fn validate(&self) -> Result<(), MockError> {
        if self.embed_dim == 0 {
            return Err(MockError::ZeroDim);
        }
        for e in &self.score_plan {
            if !(0.0..=1.0).contains(&e.score) {
                return Err(MockError::PlanOutOfRange {
                    record_id: e.record_id.clone(),
                    unit_index: e.unit_index,
                    score: e.score,
                });
            }
        }
        Ok(())
    }

    /// Reads a TOML config file and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockError> {
        let raw = fs::read_to_string(path)?;
        let cfg: MockConfig = toml::from_str(&raw).map_err(|e| MockError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Default)]
pub struct CallCounts {
    pub embed: AtomicUsize,
    pub generate: AtomicUsize,
    pub score: AtomicUsize,
}

impl CallCounts {
    pub fn embed(&self) -> usize {
        self.embed.load(Ordering::SeqCst)
    }
    pub fn generate(&self) -> usize {
        self.generate.load(Ordering::SeqCst)
    }
    pub fn score(&self) -> usize {
        self.score.load(Ordering::SeqCst)
    }
}

pub const MOCK_SENTENCE_MODELS: [&str; 3] = ["use", "labse", "laser"];
pub const MOCK_TOKEN_MODEL: &str = "mbert";
pub const MOCK_SCORE_MODEL: &str = "aps";
pub const MOCK_GENERATE_MODEL: &str = "mock-echo";

#[derive(Debug)]
pub struct MockBackend {
    cfg: MockConfig,
    plan: HashMap<(String, String), f64>,
    calls: CallCounts,
}

fn hash_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

impl MockBackend {
    pub fn new(cfg: MockConfig) -> Result<Self, MockError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            plan: HashMap::new(),
            calls: CallCounts::default(),
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.cfg
    }

    pub fn calls(&self) -> &CallCounts {
        &self.calls
    }

    /// Resolves plan entries against records so planted scores can be looked
    /// up by `(question, paragraph text)`.
    pub fn bind_records(&mut self, records: &[QaRecord]) -> Result<(), MockError> {
        let by_id: HashMap<&str, &QaRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        for e in &self.cfg.score_plan {
            let unknown = || MockError::UnknownPlanUnit {
                record_id: e.record_id.clone(),
                unit_index: e.unit_index,
            };
            let record = by_id.get(e.record_id.as_str()).ok_or_else(unknown)?;
            let paragraph = record.paragraphs.get(e.unit_index).ok_or_else(unknown)?;
            self.plan
                .insert((record.question.clone(), paragraph.clone()), e.score);
        }
        Ok(())
    }

    /// Plants a score for an exact `(question, passage)` pair.
    pub fn plant(&mut self, question: &str, passage: &str, score: f64) {
        self.plan.insert((question.to_string(), passage.to_string()), score);
    }

    /// Unit-norm vector derived from the seeded hash of `(model_id, text)`.
    pub fn mock_embed(&self, model_id: &str, text: &str) -> Vec<f64> {
        let seed = self.cfg.seed.to_le_bytes();
        let mut v = Vec::with_capacity(self.cfg.embed_dim);
        let mut block = 0u64;
        while v.len() < self.cfg.embed_dim {
            let digest = hash_parts(&[&seed, b"embed", model_id.as_bytes(), &block.to_le_bytes(), text.as_bytes()]);
            for chunk in digest.chunks_exact(4) {
                if v.len() == self.cfg.embed_dim {
                    break;
                }
                let u = u32::from_le_bytes(chunk.try_into().unwrap());
                v.push(u as f64 / u32::MAX as f64 * 2.0 - 1.0);
            }
            block += 1;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
            return v;
        }
        v.iter().map(|x| x / norm).collect()
    }

    pub fn mock_embed_tokens(&self, model_id: &str, text: &str) -> TokenEmbedding {
        let tokens: Vec<String> = tokenize(text).into_iter().map(|t| t.text).collect();
        let vectors = tokens.iter().map(|t| self.mock_embed(model_id, t)).collect();
        TokenEmbedding { tokens, vectors }
    }

    /// Planted score if present, else keyword density or a seeded hash in `[0, 1)`.
    pub fn mock_score(&self, question: &str, passage: &str) -> f64 {
        if let Some(&s) = self.plan.get(&(question.to_string(), passage.to_string())) {
            return s;
        }
        if !self.cfg.score_keywords.is_empty() {
            let hits = tokenize(passage)
                .iter()
                .filter(|t| self.cfg.score_keywords.iter().any(|k| k.to_lowercase() == t.text))
                .count();
            return (hits as f64 * self.cfg.score_keyword_weight).clamp(0.0, 1.0);
        }
        let digest = hash_parts(&[
            &self.cfg.seed.to_le_bytes(),
            b"score",
            question.as_bytes(),
            passage.as_bytes(),
        ]);
        let x = u64::from_le_bytes(digest[..8].try_into().unwrap());
        x as f64 / 2f64.powi(64)
    }

    pub fn mock_generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String, BackendError> {
        if let Some(rest) = prompt.strip_prefix(JUDGE_INSTRUCTION) {
            return self.mock_judge(rest);
        }
        match self.cfg.generator_mode {
            GeneratorMode::FixedText => Ok(self.cfg.fixed_text.clone()),
            GeneratorMode::EchoContext => {
                let context = context_slice(prompt)
                    .ok_or_else(|| BackendError::InvalidRequest("prompt is missing the ##Context/##Answer headers".into()))?;
                Ok(truncate_tokens(context, max_new_tokens).to_string())
            }
        }
    }

    fn mock_judge(&self, rest: &str) -> Result<String, BackendError> {
        let malformed = || BackendError::InvalidRequest("judge prompt is missing option headers".into());
        let o1 = rest.find(&format!("\n{OPTION1_HEADER}\n")).ok_or_else(malformed)?;
        let o2 = rest.find(&format!("\n{OPTION2_HEADER}\n")).ok_or_else(malformed)?;
        let option1 = &rest[o1 + OPTION1_HEADER.len() + 2..o2];
        let option2 = &rest[o2 + OPTION2_HEADER.len() + 2..];
        let pick = match self.cfg.judge_mode {
            JudgeMode::AlwaysOption1 => "option1",
            JudgeMode::PreferLonger if option2.chars().count() > option1.chars().count() => "option2",
            JudgeMode::PreferLonger => "option1",
        };
        Ok(pick.to_string())
    }
}

/// Text between the `##Context` and `##Answer` header lines.
pub fn context_slice(prompt: &str) -> Option<&str> {
    let open = format!("\n{CONTEXT_HEADER}\n");
    let close = format!("\n{ANSWER_HEADER}\n");
    let start = prompt.find(&open)? + open.len();
    let end = start + prompt[start..].rfind(&close)?;
    Some(&prompt[start..end])
}

/// Cuts `text` after its `max_tokens`-th token.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> &str {
    let tokens = tokenize(text);
    if tokens.len() <= max_tokens {
        return text;
    }
    if max_tokens == 0 {
        return "";
    }
    &text[..tokens[max_tokens - 1].byte_range.end]
}

impl Backend for MockBackend {
    fn identity(&self) -> String {
        format!("mock:seed={}", self.cfg.seed)
    }

    fn embed_sentences(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.calls.embed.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.mock_embed(model_id, t)).collect())
    }

    fn embed_tokens(&self, model_id: &str, texts: &[String]) -> Result<Vec<TokenEmbedding>, BackendError> {
        self.calls.embed.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.mock_embed_tokens(model_id, t)).collect())
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.calls.generate.fetch_add(1, Ordering::SeqCst);
        if let Some(limit) = self.cfg.max_prompt_tokens {
            if tokenize(&req.prompt).len() > limit {
                return Err(BackendError::ContextTooLong {
                    model_id: req.model_id.clone(),
                    limit: Some(limit),
                });
            }
        }
        self.mock_generate(&req.prompt, req.max_new_tokens)
    }

    fn score(&self, _model_id: &str, pairs: &[(String, String)]) -> Result<Vec<f64>, BackendError> {
        self.calls.score.fetch_add(1, Ordering::SeqCst);
        Ok(pairs.iter().map(|(q, p)| self.mock_score(q, p)).collect())
    }

    fn health(&self) -> Result<Vec<ModelRegistryEntry>, BackendError> {
        let dim = Some(self.cfg.embed_dim);
        let mut models: Vec<ModelRegistryEntry> = MOCK_SENTENCE_MODELS
            .iter()
            .map(|id| ModelRegistryEntry { model_id: id.to_string(), kind: ModelKind::SentenceEmbed, dim })
            .collect();
        models.push(ModelRegistryEntry { model_id: MOCK_TOKEN_MODEL.into(), kind: ModelKind::TokenEmbed, dim });
        models.push(ModelRegistryEntry { model_id: MOCK_SCORE_MODEL.into(), kind: ModelKind::Score, dim: None });
        models.push(ModelRegistryEntry { model_id: MOCK_GENERATE_MODEL.into(), kind: ModelKind::Generate, dim: None });
        Ok(models)
    }
}

/// Minimal HTTP/1.1 server exposing any [`Backend`] over the wire protocol.
///
/// Used to exercise [`crate::backend::HttpBackend`] without the real model
/// service. One thread per connection, `Connection: close` on every reply.
pub struct LoopbackServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    requests: Arc<AtomicUsize>,
}

impl LoopbackServer {
    pub fn start(backend: Arc<dyn Backend>) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let (stop2, requests2) = (stop.clone(), requests.clone());
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let backend = backend.clone();
                requests2.fetch_add(1, Ordering::SeqCst);
                thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, backend.as_ref()) {
                        log::debug!("loopback connection error: {e}");
                    }
                });
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
            requests,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_connection(stream: TcpStream, backend: &dyn Backend) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let (status, reply) = route(&method, &path, &body, backend);
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        if status == 200 { "OK" } else { "Error" },
        reply.len()
    )?;
    stream.write_all(&reply)?;
    stream.flush()
}

fn error_reply(e: &BackendError) -> (u16, Vec<u8>) {
    let (status, kind, message, limit) = match e {
        BackendError::UnknownModel(m) => (404, "UnknownModel", m.clone(), None),
        BackendError::PoolingUnsupported(m) => (400, "PoolingUnsupported", m.clone(), None),
        BackendError::ContextTooLong { model_id, limit } => (413, "PromptTooLong", model_id.clone(), *limit),
        other => (400, "BadRequest", other.to_string(), None),
    };
    let body = wire::ErrorBody {
        error: kind.into(),
        message,
        limit,
    };
    (status, serde_json::to_vec(&body).unwrap())
}

fn route(method: &str, path: &str, body: &[u8], backend: &dyn Backend) -> (u16, Vec<u8>) {
    fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, BackendError> {
        serde_json::from_slice(body).map_err(|e| BackendError::InvalidRequest(e.to_string()))
    }
    let result: Result<Vec<u8>, BackendError> = (|| match (method, path) {
        ("GET", "/v1/health") => {
            let models = backend.health()?;
            Ok(serde_json::to_vec(&wire::HealthResponse { models }).unwrap())
        }
        ("POST", "/v1/embed") => {
            let req: wire::EmbedRequest = parse(body)?;
            let resp = match req.pooling {
                Pooling::Sentence => {
                    let vectors = backend.embed_sentences(&req.model_id, &req.texts)?;
                    wire::EmbedResponse {
                        dim: vectors.first().map_or(0, Vec::len),
                        vectors: Some(vectors),
                        ..Default::default()
                    }
                }
                Pooling::Token => {
                    let out = backend.embed_tokens(&req.model_id, &req.texts)?;
                    let dim = out.iter().flat_map(|t| t.vectors.first()).next().map_or(0, Vec::len);
                    let (tokens, vectors) = out.into_iter().map(|t| (t.tokens, t.vectors)).unzip();
                    wire::EmbedResponse {
                        dim,
                        vectors: None,
                        token_vectors: Some(vectors),
                        tokens: Some(tokens),
                    }
                }
            };
            Ok(serde_json::to_vec(&resp).unwrap())
        }
        ("POST", "/v1/generate") => {
            let req: GenerationRequest = parse(body)?;
            let text = backend.generate(&req)?;
            Ok(serde_json::to_vec(&wire::GenerateResponse { text }).unwrap())
        }
        ("POST", "/v1/score") => {
            let req: wire::ScoreRequest = parse(body)?;
            let logits = backend.score(&req.model_id, &req.pairs)?;
            Ok(serde_json::to_vec(&wire::ScoreResponse { logits }).unwrap())
        }
        _ => Err(BackendError::InvalidRequest(format!("no route for {method} {path}"))),
    })();
    match result {
        Ok(bytes) => (200, bytes),
        Err(e) => error_reply(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genclient::build_qa_prompt;
    use crate::scorer::cosine;

    fn mock() -> MockBackend {
        MockBackend::new(MockConfig::default()).unwrap()
    }

    #[test]
    fn embeddings_are_stable_and_unit_norm() {
        let m = mock();
        let a = m.mock_embed("use", "नमस्ते दुनिया");
        let b = m.mock_embed("use", "नमस्ते दुनिया");
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((cosine(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_fixture_texts_are_not_parallel() {
        let m = mock();
        let texts = ["a", "b", "hello", "world", "राम", "सीता", "தமிழ்", "తెలుగు", "اردو", "x y"];
        for (i, a) in texts.iter().enumerate() {
            for b in &texts[i + 1..] {
                let c = cosine(&m.mock_embed("labse", a), &m.mock_embed("labse", b)).unwrap();
                assert!(c < 0.99, "{a} vs {b}: {c}");
            }
        }
    }

    #[test]
    fn echo_generation() {
        let m = mock();
        let p = build_qa_prompt("Q", "C", None).unwrap();
        assert_eq!(m.mock_generate(&p, 512).unwrap(), "C");
        let p = build_qa_prompt("Q", "one two, three four", None).unwrap();
        assert_eq!(m.mock_generate(&p, 3).unwrap(), "one two, three");
        assert!(matches!(m.mock_generate("no headers", 5), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn planted_scores_and_hash_determinism() {
        let mut m = MockBackend::new(MockConfig {
            score_plan: vec![PlanEntry { record_id: "r1".into(), unit_index: 1, score: 0.9 }],
            ..Default::default()
        })
        .unwrap();
        let rec: QaRecord = serde_json::from_value(serde_json::json!({
            "id": "r1", "language": "hi", "question": "q", "category": "Reason",
            "paragraphs": ["p0", "p1"], "silver_answer": "a", "split": "test"
        }))
        .unwrap();
        m.bind_records(&[rec]).unwrap();
        assert_eq!(m.mock_score("q", "p1"), 0.9);
        let h = m.mock_score("q", "p0");
        assert!((0.0..1.0).contains(&h));
        assert_eq!(h, mock().mock_score("q", "p0"));
        let other_seed = MockBackend::new(MockConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(h, other_seed.mock_score("q", "p0"));
    }

    #[test]
    fn plan_values_validated() {
        let bad = MockConfig {
            score_plan: vec![PlanEntry { record_id: "r".into(), unit_index: 0, score: 1.5 }],
            ..Default::default()
        };
        assert!(matches!(MockBackend::new(bad), Err(MockError::PlanOutOfRange { .. })));
        let toml_cfg = "seed = 3\n[[score_plan]]\nrecord_id = \"r\"\nunit_index = 0\nscore = -0.1\n";
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), toml_cfg).unwrap();
        assert!(matches!(MockConfig::load(f.path()), Err(MockError::PlanOutOfRange { .. })));
    }

    #[test]
    fn judge_modes() {
        let p = crate::genclient::build_judge_prompt("q", "g", "short", "much longer").unwrap();
        assert_eq!(mock().mock_generate(&p, 8).unwrap(), "option1");
        let m = MockBackend::new(MockConfig { judge_mode: JudgeMode::PreferLonger, ..Default::default() }).unwrap();
        assert_eq!(m.mock_generate(&p, 8).unwrap(), "option2");
    }

    #[test]
    fn prompt_limit() {
        let m = MockBackend::new(MockConfig { max_prompt_tokens: Some(5), ..Default::default() }).unwrap();
        let req = GenerationRequest::new("g", build_qa_prompt("Q", "a b c d e f", None).unwrap(), 0);
        assert!(matches!(m.generate(&req), Err(BackendError::ContextTooLong { limit: Some(5), .. })));
    }
}
