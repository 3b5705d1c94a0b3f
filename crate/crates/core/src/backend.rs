//! Model backends: the `embed` / `generate` / `score` interface, its
//! JSON-over-HTTP client, and a content-addressed disk cache.
//!
//! Wire protocol (all bodies UTF-8 JSON):
//!
//! ```text
//! POST /v1/embed     {model_id, texts[], pooling}            -> {dim, vectors[][]}
//!                                                            |  {dim, token_vectors[][][], tokens[][]}
//! POST /v1/generate  {model_id, prompt, temperature, max_new_tokens, seed} -> {text}
//! POST /v1/score     {model_id, pairs[[question, passage]]}  -> {logits[]}
//! GET  /v1/health                                            -> {models[]}
//! ```
//!
//! Error replies carry a non-2xx status and `{"error": kind, "message": .., "limit": ..}`
//! where `kind` is one of `UnknownModel`, `PoolingUnsupported`, `PromptTooLong`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::genclient::GenerationRequest;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("malformed backend reply: {0}")]
    Malformed(String),
    #[error("prompt exceeds the context limit of model `{model_id}`")]
    ContextTooLong { model_id: String, limit: Option<usize> },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("pooling not supported by model `{0}`")]
    PoolingUnsupported(String),
    #[error("backend rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Sentence,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SentenceEmbed,
    TokenEmbed,
    Generate,
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistryEntry {
    pub model_id: String,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
}

/// Token strings and one vector per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedding {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

/// The operations every model backend provides.
pub trait Backend: Send + Sync {
    /// Human-readable identity recorded in run manifests.
    fn identity(&self) -> String;

    fn embed_sentences(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;

    fn embed_tokens(&self, model_id: &str, texts: &[String]) -> Result<Vec<TokenEmbedding>, BackendError>;

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError>;

    /// Relevance logits in `[0, 1]`, one per `(question, passage)` pair.
    fn score(&self, model_id: &str, pairs: &[(String, String)]) -> Result<Vec<f64>, BackendError>;

    fn health(&self) -> Result<Vec<ModelRegistryEntry>, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn embed_sentences(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        (**self).embed_sentences(model_id, texts)
    }
    fn embed_tokens(&self, model_id: &str, texts: &[String]) -> Result<Vec<TokenEmbedding>, BackendError> {
        (**self).embed_tokens(model_id, texts)
    }
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(req)
    }
    fn score(&self, model_id: &str, pairs: &[(String, String)]) -> Result<Vec<f64>, BackendError> {
        (**self).score(model_id, pairs)
    }
    fn health(&self) -> Result<Vec<ModelRegistryEntry>, BackendError> {
        (**self).health()
    }
}

pub mod wire {
    //! Request and response bodies of the HTTP protocol.

    use super::{ModelRegistryEntry, Pooling};
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct EmbedRequest {
        pub model_id: String,
        pub texts: Vec<String>,
        pub pooling: Pooling,
    }

    #[derive(Debug, Clone, Default, Serialize, Deserialize)]
    pub struct EmbedResponse {
        pub dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub vectors: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub token_vectors: Option<Vec<Vec<Vec<f64>>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub tokens: Option<Vec<Vec<String>>>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct GenerateResponse {
        pub text: String,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ScoreRequest {
        pub model_id: String,
        pub pairs: Vec<(String, String)>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ScoreResponse {
        pub logits: Vec<f64>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct HealthResponse {
        pub models: Vec<ModelRegistryEntry>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ErrorBody {
        pub error: String,
        #[serde(default)]
        pub message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub limit: Option<usize>,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

/// Client for a backend service speaking the HTTP protocol above.
pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout_connect(Duration::from_secs(10))
                .timeout(Duration::from_secs(600))
                .build(),
            retry: RetryPolicy::default(),
            api_key: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn request(&self, method: &str, path: &str, body: Option<&serde_json::Value>) -> Result<String, BackendError> {
        let url = format!("{}{}", self.base_url, path);
        let mut delay = self.retry.base_delay;
        let mut last = String::new();
        for attempt in 1..=self.retry.attempts.max(1) {
            let mut req = self.agent.request(method, &url);
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            let result = match body {
                Some(b) => req.send_json(b.clone()),
                None => req.call(),
            };
            match result {
                Ok(resp) => {
                    return resp
                        .into_string()
                        .map_err(|e| BackendError::Malformed(e.to_string()))
                }
                Err(ureq::Error::Status(status, resp)) if status < 500 && status != 429 => {
                    let text = resp.into_string().unwrap_or_default();
                    return Err(map_error_body(status, &text));
                }
                Err(ureq::Error::Status(status, resp)) => {
                    last = format!("status {status}: {}", resp.into_string().unwrap_or_default());
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.retry.attempts {
                log::debug!("backend attempt {attempt} failed ({last}); retrying in {delay:?}");
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(BackendError::Unavailable {
            attempts: self.retry.attempts.max(1),
            reason: last,
        })
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, BackendError> {
        let value = serde_json::to_value(body).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let text = self.request("POST", path, Some(&value))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

fn map_error_body(status: u16, text: &str) -> BackendError {
    match serde_json::from_str::<wire::ErrorBody>(text) {
        Ok(body) => match body.error.as_str() {
            "UnknownModel" => BackendError::UnknownModel(body.message),
            "PoolingUnsupported" => BackendError::PoolingUnsupported(body.message),
            "PromptTooLong" => BackendError::ContextTooLong {
                model_id: body.message,
                limit: body.limit,
            },
            _ => BackendError::Rejected {
                status,
                message: format!("{}: {}", body.error, body.message),
            },
        },
        Err(_) => BackendError::Rejected {
            status,
            message: text.to_string(),
        },
    }
}

fn check_len<T>(items: &[T], expected: usize, what: &str) -> Result<(), BackendError> {
    if items.len() == expected {
        Ok(())
    } else {
        Err(BackendError::Malformed(format!(
            "expected {expected} {what}, got {}",
            items.len()
        )))
    }
}

impl Backend for HttpBackend {
    fn identity(&self) -> String {
        format!("shim:{}", self.base_url)
    }

    fn embed_sentences(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let resp: wire::EmbedResponse = self.post(
            "/v1/embed",
            &wire::EmbedRequest {
                model_id: model_id.into(),
                texts: texts.to_vec(),
                pooling: Pooling::Sentence,
            },
        )?;
        let vectors = resp
            .vectors
            .ok_or_else(|| BackendError::Malformed("missing `vectors`".into()))?;
        check_len(&vectors, texts.len(), "vectors")?;
        if vectors.iter().any(|v| v.len() != resp.dim) {
            return Err(BackendError::Malformed("vector length differs from `dim`".into()));
        }
        Ok(vectors)
    }

    fn embed_tokens(&self, model_id: &str, texts: &[String]) -> Result<Vec<TokenEmbedding>, BackendError> {
        let resp: wire::EmbedResponse = self.post(
            "/v1/embed",
            &wire::EmbedRequest {
                model_id: model_id.into(),
                texts: texts.to_vec(),
                pooling: Pooling::Token,
            },
        )?;
        let (Some(vectors), Some(tokens)) = (resp.token_vectors, resp.tokens) else {
            return Err(BackendError::Malformed("missing `token_vectors` or `tokens`".into()));
        };
        check_len(&vectors, texts.len(), "token vector lists")?;
        check_len(&tokens, texts.len(), "token lists")?;
        vectors
            .into_iter()
            .zip(tokens)
            .map(|(vectors, tokens)| {
                check_len(&vectors, tokens.len(), "token vectors")?;
                Ok(TokenEmbedding { tokens, vectors })
            })
            .collect()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let resp: wire::GenerateResponse = self.post("/v1/generate", req)?;
        Ok(resp.text)
    }

    fn score(&self, model_id: &str, pairs: &[(String, String)]) -> Result<Vec<f64>, BackendError> {
        let resp: wire::ScoreResponse = self.post(
            "/v1/score",
            &wire::ScoreRequest {
                model_id: model_id.into(),
                pairs: pairs.to_vec(),
            },
        )?;
        check_len(&resp.logits, pairs.len(), "logits")?;
        Ok(resp.logits)
    }

    fn health(&self) -> Result<Vec<ModelRegistryEntry>, BackendError> {
        let text = self.request("GET", "/v1/health", None)?;
        let resp: wire::HealthResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        Ok(resp.models)
    }
}

#[derive(Debug, Default)]
pub struct CacheStats {
    pub hits: AtomicUsize,
    pub misses: AtomicUsize,
}

impl CacheStats {
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

const WRITE_STRIPES: usize = 64;

/// Disk cache in front of another backend.
///
/// Entries live at `<root>/{score,embed,generate}/<sha256>.json`, keyed by
/// the hash of the canonical JSON of the request item. Writes go through a
/// temp file and an atomic rename; writers of the same key are serialized.
pub struct CachingBackend<B> {
    inner: B,
    root: PathBuf,
    stats: CacheStats,
    stripes: Vec<Mutex<()>>,
}

#[derive(Serialize)]
struct ScoreKey<'a> {
    model_id: &'a str,
    question: &'a str,
    passage: &'a str,
}

#[derive(Serialize)]
struct EmbedKey<'a> {
    model_id: &'a str,
    pooling: Pooling,
    text: &'a str,
}

#[derive(Serialize, Deserialize)]
struct ScoreEntry {
    logit: f64,
}

#[derive(Serialize, Deserialize)]
struct SentenceEntry {
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GenerateEntry {
    text: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn key_of<K: Serialize>(key: &K) -> String {
    sha256_hex(&serde_json::to_vec(key).expect("cache keys serialize"))
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

impl<B: Backend> CachingBackend<B> {
    pub fn new(inner: B, root: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            root: root.into(),
            stats: CacheStats::default(),
            stripes: (0..WRITE_STRIPES).map(|_| Mutex::new(())).collect(),
        }
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn path(&self, kind: &str, key: &str) -> PathBuf {
        self.root.join(kind).join(format!("{key}.json"))
    }

    fn read<T: DeserializeOwned>(&self, kind: &str, key: &str) -> Option<T> {
        let bytes = fs::read(self.path(kind, key)).ok()?;
        // a torn or foreign file is treated as a miss
        serde_json::from_slice(&bytes).ok()
    }

    fn write<T: Serialize>(&self, kind: &str, key: &str, value: &T) {
        let stripe = usize::from_str_radix(&key[..4], 16).unwrap_or(0) % WRITE_STRIPES;
        let _guard = self.stripes[stripe].lock().unwrap_or_else(|e| e.into_inner());
        let bytes = serde_json::to_vec(value).expect("cache entries serialize");
        if let Err(e) = write_atomic(&self.path(kind, key), &bytes) {
            log::warn!("cache write failed for {kind}/{key}: {e}");
        }
    }

    /// Looks up every item, forwards the misses in one batch, stores results.
    fn batched<T, E, K, F>(&self, kind: &str, keys: &[K], fetch: F) -> Result<Vec<T>, BackendError>
    where
        T: Clone,
        E: Serialize + DeserializeOwned,
        K: Serialize,
        F: FnOnce(&[usize]) -> Result<Vec<T>, BackendError>,
        T: Into<E>,
        E: Into<T>,
    {
        let hashes: Vec<String> = keys.iter().map(key_of).collect();
        let mut out: Vec<Option<T>> = hashes.iter().map(|h| self.read::<E>(kind, h).map(Into::into)).collect();
        let missing: Vec<usize> = (0..out.len()).filter(|&i| out[i].is_none()).collect();
        self.stats.hits.fetch_add(out.len() - missing.len(), Ordering::Relaxed);
        self.stats.misses.fetch_add(missing.len(), Ordering::Relaxed);
        if !missing.is_empty() {
            let fetched = fetch(&missing)?;
            check_len(&fetched, missing.len(), "results")?;
            for (&i, value) in missing.iter().zip(fetched) {
                let entry: E = value.clone().into();
                self.write(kind, &hashes[i], &entry);
                out[i] = Some(value);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

impl From<f64> for ScoreEntry {
    fn from(logit: f64) -> Self {
        Self { logit }
    }
}
impl From<ScoreEntry> for f64 {
    fn from(e: ScoreEntry) -> Self {
        e.logit
    }
}
impl From<Vec<f64>> for SentenceEntry {
    fn from(vector: Vec<f64>) -> Self {
        Self { vector }
    }
}
impl From<SentenceEntry> for Vec<f64> {
    fn from(e: SentenceEntry) -> Self {
        e.vector
    }
}

impl<B: Backend> Backend for CachingBackend<B> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn embed_sentences(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let keys: Vec<EmbedKey> = texts
            .iter()
            .map(|t| EmbedKey { model_id, pooling: Pooling::Sentence, text: t })
            .collect();
        self.batched::<Vec<f64>, SentenceEntry, _, _>("embed", &keys, |missing| {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            self.inner.embed_sentences(model_id, &batch)
        })
    }

    fn embed_tokens(&self, model_id: &str, texts: &[String]) -> Result<Vec<TokenEmbedding>, BackendError> {
        let keys: Vec<EmbedKey> = texts
            .iter()
            .map(|t| EmbedKey { model_id, pooling: Pooling::Token, text: t })
            .collect();
        self.batched::<TokenEmbedding, TokenEmbedding, _, _>("embed", &keys, |missing| {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            self.inner.embed_tokens(model_id, &batch)
        })
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        let key = key_of(req);
        if let Some(hit) = self.read::<GenerateEntry>("generate", &key) {
            self.stats.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.text);
        }
        self.stats.misses.fetch_add(1, Ordering::Relaxed);
        let text = self.inner.generate(req)?;
        self.write("generate", &key, &GenerateEntry { text: text.clone() });
        Ok(text)
    }

    fn score(&self, model_id: &str, pairs: &[(String, String)]) -> Result<Vec<f64>, BackendError> {
        let keys: Vec<ScoreKey> = pairs
            .iter()
            .map(|(q, p)| ScoreKey { model_id, question: q, passage: p })
            .collect();
        self.batched::<f64, ScoreEntry, _, _>("score", &keys, |missing| {
            let batch: Vec<(String, String)> = missing.iter().map(|&i| pairs[i].clone()).collect();
            self.inner.score(model_id, &batch)
        })
    }

    fn health(&self) -> Result<Vec<ModelRegistryEntry>, BackendError> {
        self.inner.health()
    }
}
