//! Run orchestration behind the command-line tool.
//!
//! A run directory `<out>/<run_id>/` always starts with `manifest.json`;
//! result files follow and are written atomically. Anything that feeds a
//! report is sorted by record id first, so worker scheduling never shows up
//! in the output.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{sha256_hex, write_atomic, Backend, BackendError, CachingBackend, HttpBackend, RetryPolicy};
use crate::corpus::{attach_annotations, corpus_stats, load_dataset, Category, CorpusError, CorpusStats, QaRecord, Split};
use crate::explain::{
    coverage_matrix, coverage_trend_check, shapley_rationale, surrogate_rationale, write_coverage_csv, CoverageMatrix,
    ExplainError, Rationale, SurrogateParams, DEFAULT_PERMUTATIONS, DEFAULT_THRESHOLDS,
};
use crate::genclient::{
    build_qa_prompt, generate, Candidate, GenError, GenerationRequest, Judge, DEFAULT_MAX_NEW_TOKENS,
    DEFAULT_TEMPERATURE,
};
use crate::metrics::{
    aggregate, best_k_category_profile, common_superiority, evaluate_pair, improvement, read_rows_csv,
    round_half_up, write_rows_csv, MeanMode, MetricError, MetricRow, Report, SemanticModels,
};
use crate::mockbackend::{MockBackend, MockConfig, MockError};
use crate::scorer::{Bm25Scorer, CrossEncoderScorer, EmbedScorer, PassageScorer, ScoreError};
use crate::shorten::{shorten, ScorerKind, ShortContext, ShortenError, Strategy, StrategyKind};

pub const ENV_BACKEND_URL: &str = "LONGQA_BACKEND_URL";
pub const ENV_API_KEY: &str = "LONGQA_API_KEY";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ROWS_FILE: &str = "rows.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const SHORTENED_FILE: &str = "shortened.jsonl";
pub const JUDGE_LOG_FILE: &str = "judge.log";
pub const JUDGE_REPORT_FILE: &str = "judge.json";
pub const RATIONALES_FILE: &str = "rationales.jsonl";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const TREND_FILE: &str = "trend.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] CorpusError),
    #[error(transparent)]
    Mock(#[from] MockError),
    #[error("run directory {0} already exists; choose another run id")]
    RunExists(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("the two runs share no record ids")]
    NoCommonIds,
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Backend(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Shim,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mock" => Ok(BackendKind::Mock),
            "shim" => Ok(BackendKind::Shim),
            other => Err(format!("unknown backend `{other}` (expected mock or shim)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMethod {
    #[default]
    Surrogate,
    Shapley,
}

impl std::str::FromStr for ExplainMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "surrogate" => Ok(ExplainMethod::Surrogate),
            "shapley" => Ok(ExplainMethod::Shapley),
            other => Err(format!("unknown explain method `{other}` (expected surrogate or shapley)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub dataset: PathBuf,
    pub triples: Option<PathBuf>,
    pub coref: Option<PathBuf>,
    pub strategy: StrategyKind,
    pub scorer: ScorerKind,
    pub top_k: usize,
    pub backend: BackendKind,
    pub backend_url: Option<String>,
    pub mock_config: Option<PathBuf>,
    pub model: String,
    pub judge_model: String,
    pub score_model: String,
    pub embed_model: String,
    pub semantic: SemanticModels,
    pub mean_mode: MeanMode,
    pub seed: u64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub workers: usize,
    pub out: PathBuf,
    /// `None` disables the disk cache.
    pub cache_dir: Option<PathBuf>,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
    /// Selection overlap is reported against this scorer for non-B strategies.
    pub overlap_scorer: Option<ScorerKind>,
    pub explain_method: ExplainMethod,
    pub explain_samples: usize,
    pub explain_limit: Option<usize>,
    pub best_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            dataset: PathBuf::new(),
            triples: None,
            coref: None,
            strategy: StrategyKind::B,
            scorer: ScorerKind::Aps,
            top_k: 1,
            backend: BackendKind::Mock,
            backend_url: None,
            mock_config: None,
            model: "mock-echo".into(),
            judge_model: "judge".into(),
            score_model: "aps".into(),
            embed_model: "labse".into(),
            semantic: SemanticModels::default(),
            mean_mode: MeanMode::Arithmetic,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            workers: 4,
            out: PathBuf::from("runs"),
            cache_dir: Some(PathBuf::from("cache")),
            retry_attempts: 3,
            retry_base_delay_ms: 1000,
            overlap_scorer: Some(ScorerKind::Bm25),
            explain_method: ExplainMethod::Surrogate,
            explain_samples: SurrogateParams::default().n_samples,
            explain_limit: None,
            best_k: 100,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&raw).map_err(|e| PipelineError::Parse { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.dataset.as_os_str().is_empty() {
            return bad("dataset path is required");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1");
        }
        if self.retry_attempts == 0 {
            return bad("retry_attempts must be at least 1");
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return bad("run_id must be a plain directory name");
            }
        }
        if self.backend == BackendKind::Shim && self.resolved_backend_url().is_none() {
            return bad("the shim backend needs --backend-url or LONGQA_BACKEND_URL");
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        Strategy::new(self.strategy, self.scorer, self.top_k)
    }

    pub fn resolved_run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| match self.strategy {
            StrategyKind::B => format!("B-seed{}", self.seed),
            s => format!("{s}-{}-k{}-seed{}", self.scorer, self.top_k, self.seed),
        })
    }

    pub fn resolved_backend_url(&self) -> Option<String> {
        self.backend_url.clone().or_else(|| std::env::var(ENV_BACKEND_URL).ok().filter(|u| !u.is_empty()))
    }

    /// SHA-256 of the canonical JSON form of this config.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_secs: f64,
    pub median_secs: f64,
    pub max_secs: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let mid = s.len() / 2;
        let median = if s.len() % 2 == 0 { (s[mid - 1] + s[mid]) / 2.0 } else { s[mid] };
        Self {
            count: s.len(),
            mean_secs: s.iter().sum::<f64>() / s.len() as f64,
            median_secs: median,
            max_secs: s[s.len() - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Shorten,
    Prompt,
    Generate,
    Evaluate,
    Judge,
    Explain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub record_id: String,
    pub stage: Stage,
    pub error: String,
    /// The backend could not be reached or misbehaved.
    pub backend: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Answer,
    Judge,
    Explain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub kind: RunKind,
    pub status: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub dataset_path: PathBuf,
    pub dataset_sha256: String,
    pub strategy: StrategyKind,
    pub scorer: ScorerKind,
    pub k: usize,
    pub backend_identity: String,
    pub seed: u64,
    pub mock_seed: Option<u64>,
    /// Runs this one was derived from (judge and explain runs).
    pub inputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub records: usize,
    pub latency: LatencyStats,
    pub failures: Vec<Failure>,
}

impl RunManifest {
    pub fn backend_failures(&self) -> usize {
        self.failures.iter().filter(|f| f.backend).count()
    }

    pub fn load(run_dir: &Path) -> Result<Self, PipelineError> {
        read_json(&run_dir.join(MANIFEST_FILE))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let raw = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&raw).map_err(|e| PipelineError::Parse { path: path.to_path_buf(), reason: e.to_string() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut bytes = Vec::new();
    for item in items {
        serde_json::to_writer(&mut bytes, item).expect("serializable");
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn file_sha256(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Creates `<out>/<run_id>`, refusing to reuse an existing directory.
fn create_run_dir(out: &Path, run_id: &str) -> Result<PathBuf, PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let dir = out.join(run_id);
    match fs::create_dir(&dir) {
        Ok(()) => Ok(dir),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::RunExists(dir)),
        Err(e) => Err(PipelineError::Io { path: dir, source: e }),
    }
}

/// Test records with annotations attached when annotation files are configured.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<QaRecord>, PipelineError> {
    let records = load_dataset(&cfg.dataset)?;
    let records = if cfg.triples.is_some() || cfg.coref.is_some() {
        attach_annotations(records, cfg.triples.as_deref(), cfg.coref.as_deref())?
    } else {
        records
    };
    Ok(records.into_iter().filter(|r| r.split == Split::Test).collect())
}

/// Builds the configured backend, with the disk cache in front when enabled.
pub fn build_backend(cfg: &RunConfig, records: &[QaRecord]) -> Result<(Arc<dyn Backend>, Option<u64>), PipelineError> {
    let (inner, mock_seed): (Arc<dyn Backend>, Option<u64>) = match cfg.backend {
        BackendKind::Mock => {
            let mock_cfg = match &cfg.mock_config {
                Some(p) => MockConfig::load(p)?,
                None => MockConfig::default(),
            };
            let seed = mock_cfg.seed;
            let mut mock = MockBackend::new(mock_cfg)?;
            mock.bind_records(records)?;
            (Arc::new(mock), Some(seed))
        }
        BackendKind::Shim => {
            let url = cfg
                .resolved_backend_url()
                .ok_or_else(|| PipelineError::Config("missing backend url".into()))?;
            let http = HttpBackend::new(url)
                .with_retry(RetryPolicy {
                    attempts: cfg.retry_attempts,
                    base_delay: Duration::from_millis(cfg.retry_base_delay_ms),
                })
                .with_api_key(std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty()));
            (Arc::new(http), None)
        }
    };
    let backend: Arc<dyn Backend> = match &cfg.cache_dir {
        Some(dir) => Arc::new(CachingBackend::new(inner, dir.clone())),
        None => inner,
    };
    Ok((backend, mock_seed))
}

pub fn build_scorer(kind: ScorerKind, backend: Arc<dyn Backend>, cfg: &RunConfig) -> Box<dyn PassageScorer> {
    match kind {
        ScorerKind::Aps => Box::new(CrossEncoderScorer { backend, model_id: cfg.score_model.clone() }),
        ScorerKind::Bm25 => Box::new(Bm25Scorer::default()),
        ScorerKind::Embed => Box::new(EmbedScorer { backend, model_id: cfg.embed_model.clone() }),
    }
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

fn is_backend_shorten(e: &ShortenError) -> bool {
    matches!(e, ShortenError::Score(ScoreError::Backend(_)) | ShortenError::Score(ScoreError::OutOfRange(_)))
}

fn is_backend_gen(e: &GenError) -> bool {
    matches!(e, GenError::Backend(_))
}

fn is_backend_metric(e: &MetricError) -> bool {
    matches!(e, MetricError::Backend(_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub record_id: String,
    pub strategy: StrategyKind,
    pub category: Category,
    pub answer: String,
    pub context_tokens: usize,
    pub selected_units: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortenedRecord {
    pub record_id: String,
    pub context: ShortContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub against: ScorerKind,
    pub records: usize,
    /// Pooled `Σ|A ∩ B| / Σ|A|` over records, A = configured selection.
    pub overlap: f64,
    pub differed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: StrategyKind,
    pub scorer: ScorerKind,
    pub k: usize,
    pub records: usize,
    pub failures: usize,
    pub metrics: Option<Report>,
    pub overlap: Option<OverlapReport>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub report: RunReport,
}

impl RunOutcome {
    /// 0 when every record succeeded, 2 when some record hit a backend failure.
    pub fn exit_code(&self) -> i32 {
        if self.manifest.backend_failures() > 0 {
            2
        } else {
            0
        }
    }
}

struct RecordResult {
    shortened: Option<ShortenedRecord>,
    answer: Option<AnswerRecord>,
    row: Option<MetricRow>,
    latency: Option<f64>,
    overlap: Option<(usize, usize)>,
    failure: Option<Failure>,
}

fn fail(record: &QaRecord, stage: Stage, error: String, backend: bool) -> Failure {
    Failure { record_id: record.id.clone(), stage, error, backend }
}

struct RunContext<'a> {
    cfg: &'a RunConfig,
    backend: &'a dyn Backend,
    scorer: &'a dyn PassageScorer,
    overlap_scorer: Option<&'a dyn PassageScorer>,
}

impl RunContext<'_> {
    fn process(&self, record: &QaRecord) -> RecordResult {
        let mut out = RecordResult {
            shortened: None,
            answer: None,
            row: None,
            latency: None,
            overlap: None,
            failure: None,
        };
        let strategy = self.cfg.strategy();
        let ctx = match shorten(record, strategy, self.scorer) {
            Ok(c) => c,
            Err(e) => {
                out.failure = Some(fail(record, Stage::Shorten, e.to_string(), is_backend_shorten(&e)));
                return out;
            }
        };
        if let Some(other) = self.overlap_scorer {
            if let Ok(alt) = shorten(record, strategy, other) {
                let a = crate::scorer::as_set(&ctx.selected_indices());
                let b = crate::scorer::as_set(&alt.selected_indices());
                out.overlap = Some((a.intersection(&b).count(), a.len()));
            }
        }
        out.shortened = Some(ShortenedRecord { record_id: record.id.clone(), context: ctx.clone() });

        let prompt = match build_qa_prompt(&record.question, &ctx.text(), None) {
            Ok(p) => p,
            Err(e) => {
                out.failure = Some(fail(record, Stage::Prompt, e.to_string(), false));
                return out;
            }
        };
        let mut req = GenerationRequest::new(self.cfg.model.clone(), prompt, self.cfg.seed);
        req.temperature = self.cfg.temperature;
        req.max_new_tokens = self.cfg.max_new_tokens;
        let generation = match generate(&req, self.backend) {
            Ok(g) => g,
            Err(e) => {
                out.failure = Some(fail(record, Stage::Generate, e.to_string(), is_backend_gen(&e)));
                return out;
            }
        };
        out.latency = Some(generation.latency_secs);
        out.answer = Some(AnswerRecord {
            record_id: record.id.clone(),
            strategy: strategy.kind,
            category: record.category,
            answer: generation.text.clone(),
            context_tokens: ctx.token_count,
            selected_units: ctx.selected_indices(),
        });
        match evaluate_pair(record, &generation.text, strategy.kind, self.backend, &self.cfg.semantic, self.cfg.mean_mode) {
            Ok(row) => out.row = Some(row.summary()),
            Err(e) => out.failure = Some(fail(record, Stage::Evaluate, e.to_string(), is_backend_metric(&e))),
        }
        out
    }
}

fn base_manifest(cfg: &RunConfig, run_id: &str, kind: RunKind, dataset_sha256: String) -> RunManifest {
    RunManifest {
        run_id: run_id.to_string(),
        kind,
        status: "running".into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        dataset_path: cfg.dataset.clone(),
        dataset_sha256,
        strategy: cfg.strategy,
        scorer: cfg.scorer,
        k: cfg.top_k,
        backend_identity: String::new(),
        seed: cfg.seed,
        mock_seed: None,
        inputs: Vec::new(),
        started_at: now(),
        finished_at: None,
        records: 0,
        latency: LatencyStats::default(),
        failures: Vec::new(),
    }
}

/// shorten → prompt → generate → evaluate for every test record.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let records = load_records(cfg)?;
    let dataset_sha256 = file_sha256(&cfg.dataset)?;
    let (backend, mock_seed) = build_backend(cfg, &records)?;
    let run_id = cfg.resolved_run_id();
    let run_dir = create_run_dir(&cfg.out, &run_id)?;

    let mut manifest = base_manifest(cfg, &run_id, RunKind::Answer, dataset_sha256);
    manifest.backend_identity = backend.identity();
    manifest.mock_seed = mock_seed;
    manifest.records = records.len();
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;

    let scorer = build_scorer(cfg.scorer, backend.clone(), cfg);
    let overlap_scorer = match cfg.overlap_scorer {
        Some(kind) if cfg.strategy != StrategyKind::B && kind != cfg.scorer => {
            Some(build_scorer(kind, backend.clone(), cfg))
        }
        _ => None,
    };
    let ctx = RunContext {
        cfg,
        backend: backend.as_ref(),
        scorer: scorer.as_ref(),
        overlap_scorer: overlap_scorer.as_deref(),
    };
    let pool = worker_pool(cfg.workers)?;
    let mut results: Vec<RecordResult> = pool.install(|| records.par_iter().map(|r| ctx.process(r)).collect());
    let order: HashMap<&str, usize> = {
        let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    };
    let mut indexed: Vec<(usize, RecordResult)> = results
        .drain(..)
        .zip(&records)
        .map(|(res, rec)| (order[rec.id.as_str()], res))
        .collect();
    indexed.sort_by_key(|(i, _)| *i);

    let mut shortened = Vec::new();
    let mut answers = Vec::new();
    let mut rows = Vec::new();
    let mut latencies = Vec::new();
    let (mut inter, mut total, mut overlap_records) = (0usize, 0usize, 0usize);
    for (_, res) in indexed {
        shortened.extend(res.shortened);
        answers.extend(res.answer);
        rows.extend(res.row);
        latencies.extend(res.latency);
        if let Some((i, t)) = res.overlap {
            inter += i;
            total += t;
            overlap_records += 1;
        }
        if let Some(f) = res.failure {
            log::warn!("record {} failed at {:?}: {}", f.record_id, f.stage, f.error);
            manifest.failures.push(f);
        }
    }

    write_jsonl(&run_dir.join(SHORTENED_FILE), &shortened)?;
    write_jsonl(&run_dir.join(ANSWERS_FILE), &answers)?;
    let mut csv_bytes = Vec::new();
    write_rows_csv(&mut csv_bytes, &rows)?;
    let rows_path = run_dir.join(ROWS_FILE);
    write_atomic(&rows_path, &csv_bytes).map_err(io_err(&rows_path))?;

    let overlap = match (overlap_scorer.is_some(), total) {
        (true, t) if t > 0 => {
            let against = cfg.overlap_scorer.expect("set when a scorer was built");
            let o = inter as f64 / t as f64;
            Some(OverlapReport { against, records: overlap_records, overlap: o, differed: 1.0 - o })
        }
        _ => None,
    };
    let report = RunReport {
        strategy: cfg.strategy,
        scorer: cfg.scorer,
        k: cfg.top_k,
        records: records.len(),
        failures: manifest.failures.len(),
        metrics: aggregate(&rows).ok(),
        overlap,
    };
    write_json(&run_dir.join(REPORT_FILE), &report)?;

    manifest.latency = LatencyStats::from_samples(&latencies);
    manifest.status = "complete".into();
    manifest.finished_at = Some(now());
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunOutcome { run_dir, manifest, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeLogLine {
    pub record_id: String,
    pub item_index: usize,
    pub option1_source: StrategyKind,
    pub option2_source: StrategyKind,
    /// Which run supplied option1.
    pub option1_run: String,
    pub raw_reply: String,
    pub tie_inputs: bool,
    pub parsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub run_a: String,
    pub run_b: String,
    pub strategy_a: StrategyKind,
    pub strategy_b: StrategyKind,
    pub common_items: usize,
    pub tie_items: usize,
    pub unparseable: usize,
    pub decisive_items: usize,
    /// Percentages over decisive (parsed, non-tie) items.
    pub wins_a_pct: f64,
    pub wins_b_pct: f64,
    /// Set when there were no decisive items; the percentages are then 0.
    pub no_decisive_items: bool,
}

#[derive(Debug)]
pub struct JudgeOutcomeSummary {
    pub run_dir: PathBuf,
    pub report: JudgeReport,
    pub manifest: RunManifest,
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Pairwise judging of two answer runs over their common records.
///
/// Item `i` of the record-id-sorted common set presents run A's answer as
/// option1 when `i` is even and as option2 when it is odd.
pub fn run_judge(cfg: &RunConfig, run_a: &Path, run_b: &Path) -> Result<JudgeOutcomeSummary, PipelineError> {
    cfg.validate()?;
    let manifest_a = RunManifest::load(run_a)?;
    let manifest_b = RunManifest::load(run_b)?;
    let answers_a: Vec<AnswerRecord> = read_jsonl(&run_a.join(ANSWERS_FILE))?;
    let answers_b: Vec<AnswerRecord> = read_jsonl(&run_b.join(ANSWERS_FILE))?;
    let records = load_records(cfg)?;
    let by_id: HashMap<&str, &QaRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let b_by_id: HashMap<&str, &AnswerRecord> = answers_b.iter().map(|a| (a.record_id.as_str(), a)).collect();
    let mut common: Vec<(&AnswerRecord, &AnswerRecord, &QaRecord)> = answers_a
        .iter()
        .filter_map(|a| {
            let b = b_by_id.get(a.record_id.as_str())?;
            let rec = by_id.get(a.record_id.as_str())?;
            Some((a, *b, *rec))
        })
        .collect();
    if common.is_empty() {
        return Err(PipelineError::NoCommonIds);
    }
    common.sort_by(|x, y| x.0.record_id.cmp(&y.0.record_id));

    let (backend, mock_seed) = build_backend(cfg, &records)?;
    let run_id = cfg.run_id.clone().unwrap_or_else(|| format!("judge-{}-vs-{}", run_label(run_a), run_label(run_b)));
    let run_dir = create_run_dir(&cfg.out, &run_id)?;
    let mut manifest = base_manifest(cfg, &run_id, RunKind::Judge, file_sha256(&cfg.dataset)?);
    manifest.strategy = manifest_a.strategy;
    manifest.backend_identity = backend.identity();
    manifest.mock_seed = mock_seed;
    manifest.inputs = vec![run_a.to_path_buf(), run_b.to_path_buf()];
    manifest.records = common.len();
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;

    let judge = Judge { backend: backend.as_ref(), model_id: &cfg.judge_model, seed: cfg.seed };
    let label_a = run_label(run_a);
    let label_b = run_label(run_b);
    let pool = worker_pool(cfg.workers)?;
    let outcomes: Vec<Result<JudgeLogLine, Failure>> = pool.install(|| {
        common
            .par_iter()
            .enumerate()
            .map(|(i, (a, b, rec))| {
                let x = Candidate { answer: &a.answer, strategy: a.strategy };
                let y = Candidate { answer: &b.answer, strategy: b.strategy };
                let out = judge
                    .judge(&rec.question, &rec.silver_answer, x, y, i)
                    .map_err(|e| fail(rec, Stage::Judge, e.to_string(), is_backend_gen(&e)))?;
                let a_first = i % 2 == 0;
                let option1_run = if a_first { label_a.clone() } else { label_b.clone() };
                let (o1, o2) = if a_first { (a.strategy, b.strategy) } else { (b.strategy, a.strategy) };
                Ok(match out.verdict {
                    Ok(v) => JudgeLogLine {
                        record_id: rec.id.clone(),
                        item_index: i,
                        option1_source: v.option1_source,
                        option2_source: v.option2_source,
                        option1_run,
                        raw_reply: v.raw_reply.clone(),
                        tie_inputs: v.tie_inputs,
                        parsed: true,
                    },
                    Err(raw) => JudgeLogLine {
                        record_id: rec.id.clone(),
                        item_index: i,
                        option1_source: o1,
                        option2_source: o2,
                        option1_run,
                        raw_reply: raw,
                        tie_inputs: a.answer.trim() == b.answer.trim(),
                        parsed: false,
                    },
                })
            })
            .collect()
    });

    let mut lines = Vec::new();
    let (mut ties, mut unparseable, mut wins_a, mut wins_b) = (0, 0, 0, 0);
    for o in outcomes {
        match o {
            Ok(line) => {
                if !line.parsed {
                    unparseable += 1;
                } else if line.tie_inputs {
                    ties += 1;
                } else {
                    let picked_option1 = crate::genclient::parse_judge_output(&line.raw_reply)
                        .map(|w| w == crate::genclient::JudgeOption::Option1)
                        .unwrap_or(false);
                    let a_is_option1 = line.item_index % 2 == 0;
                    if picked_option1 == a_is_option1 {
                        wins_a += 1;
                    } else {
                        wins_b += 1;
                    }
                }
                lines.push(line);
            }
            Err(f) => manifest.failures.push(f),
        }
    }
    write_jsonl(&run_dir.join(JUDGE_LOG_FILE), &lines)?;
    let decisive = wins_a + wins_b;
    let pct = |n: usize| if decisive == 0 { 0.0 } else { round_half_up(100.0 * n as f64 / decisive as f64, 1) };
    let report = JudgeReport {
        run_a: label_a,
        run_b: label_b,
        strategy_a: manifest_a.strategy,
        strategy_b: manifest_b.strategy,
        common_items: common.len(),
        tie_items: ties,
        unparseable,
        decisive_items: decisive,
        wins_a_pct: pct(wins_a),
        wins_b_pct: pct(wins_b),
        no_decisive_items: decisive == 0,
    };
    write_json(&run_dir.join(JUDGE_REPORT_FILE), &report)?;
    manifest.status = "complete".into();
    manifest.finished_at = Some(now());
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(JudgeOutcomeSummary { run_dir, report, manifest })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleRecord {
    pub record_id: String,
    pub unit_index: usize,
    #[serde(flatten)]
    pub rationale: Rationale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub thresholds: Vec<f64>,
    pub occupied_buckets: usize,
    /// `None` when fewer than two buckets are occupied.
    pub non_decreasing: Option<Vec<bool>>,
}

#[derive(Debug)]
pub struct ExplainOutcome {
    pub run_dir: PathBuf,
    pub coverage: CoverageMatrix,
    pub trend: TrendReport,
    pub rationales: usize,
}

fn trend_of(matrix: &CoverageMatrix) -> TrendReport {
    TrendReport {
        thresholds: matrix.thresholds.clone(),
        occupied_buckets: matrix.buckets.iter().filter(|b| b.cells.is_some()).count(),
        non_decreasing: coverage_trend_check(matrix).ok(),
    }
}

/// Writes `coverage.csv` and `trend.json` for a set of rationales.
pub fn write_coverage(dir: &Path, rationales: &[Rationale]) -> Result<(CoverageMatrix, TrendReport), PipelineError> {
    let matrix = coverage_matrix(rationales, &DEFAULT_THRESHOLDS)?;
    let mut bytes = Vec::new();
    write_coverage_csv(&mut bytes, &matrix)?;
    let path = dir.join(COVERAGE_FILE);
    write_atomic(&path, &bytes).map_err(io_err(&path))?;
    let trend = trend_of(&matrix);
    write_json(&dir.join(TREND_FILE), &trend)?;
    Ok((matrix, trend))
}

/// Coverage analysis of an existing rationale file (one rationale per line).
pub fn coverage_from_file(path: &Path) -> Result<(CoverageMatrix, TrendReport), PipelineError> {
    let rationales: Vec<Rationale> = read_jsonl(path)?;
    let matrix = coverage_matrix(&rationales, &DEFAULT_THRESHOLDS)?;
    let trend = trend_of(&matrix);
    Ok((matrix, trend))
}

/// Rationales for every selected (question, unit) pair of an answer run.
pub fn run_explain(cfg: &RunConfig, source_run: &Path) -> Result<ExplainOutcome, PipelineError> {
    cfg.validate()?;
    let source = RunManifest::load(source_run)?;
    if source.strategy == StrategyKind::B {
        return Err(PipelineError::Config("explain needs a run that used a passage scorer".into()));
    }
    let shortened: Vec<ShortenedRecord> = read_jsonl(&source_run.join(SHORTENED_FILE))?;
    let records = load_records(cfg)?;
    let by_id: HashMap<&str, &QaRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut pairs: Vec<(&QaRecord, usize, String)> = Vec::new();
    for s in &shortened {
        let Some(rec) = by_id.get(s.record_id.as_str()) else { continue };
        for u in &s.context.units {
            pairs.push((rec, u.unit_index, u.text.clone()));
        }
    }
    if let Some(limit) = cfg.explain_limit {
        pairs.truncate(limit);
    }
    if pairs.is_empty() {
        return Err(PipelineError::Explain(ExplainError::EmptyInput));
    }

    let (backend, mock_seed) = build_backend(cfg, &records)?;
    let scorer = build_scorer(source.scorer, backend.clone(), cfg);
    let run_id = cfg.run_id.clone().unwrap_or_else(|| format!("explain-{}", run_label(source_run)));
    let run_dir = create_run_dir(&cfg.out, &run_id)?;
    let mut manifest = base_manifest(cfg, &run_id, RunKind::Explain, file_sha256(&cfg.dataset)?);
    manifest.strategy = source.strategy;
    manifest.scorer = source.scorer;
    manifest.k = source.k;
    manifest.backend_identity = backend.identity();
    manifest.mock_seed = mock_seed;
    manifest.inputs = vec![source_run.to_path_buf()];
    manifest.records = pairs.len();
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;

    let params = SurrogateParams { n_samples: cfg.explain_samples, ..Default::default() };
    let pool = worker_pool(cfg.workers)?;
    let results: Vec<Result<RationaleRecord, Failure>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|(rec, unit_index, text)| {
                let r = match cfg.explain_method {
                    ExplainMethod::Surrogate => surrogate_rationale(&rec.question, text, scorer.as_ref(), &params, cfg.seed),
                    ExplainMethod::Shapley => {
                        shapley_rationale(&rec.question, text, scorer.as_ref(), DEFAULT_PERMUTATIONS, cfg.seed)
                    }
                };
                r.map(|rationale| RationaleRecord { record_id: rec.id.clone(), unit_index: *unit_index, rationale })
                    .map_err(|e| {
                        let backend_err = matches!(e, ExplainError::Scorer(ScoreError::Backend(_)));
                        fail(rec, Stage::Explain, e.to_string(), backend_err)
                    })
            })
            .collect()
    });
    let mut lines = Vec::new();
    for r in results {
        match r {
            Ok(line) => lines.push(line),
            Err(f) => manifest.failures.push(f),
        }
    }
    lines.sort_by(|a, b| a.record_id.cmp(&b.record_id).then(a.unit_index.cmp(&b.unit_index)));
    write_jsonl(&run_dir.join(RATIONALES_FILE), &lines)?;
    let rationales: Vec<Rationale> = lines.iter().map(|l| l.rationale.clone()).collect();
    let (coverage, trend) = write_coverage(&run_dir, &rationales)?;
    manifest.status = "complete".into();
    manifest.finished_at = Some(now());
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(ExplainOutcome { run_dir, coverage, trend, rationales: lines.len() })
}

/// Validates a dataset and its annotation files, returning corpus statistics.
pub fn ingest(dataset: &Path, triples: Option<&Path>, coref: Option<&Path>) -> Result<CorpusStats, PipelineError> {
    let records = attach_annotations(load_dataset(dataset)?, triples, coref)?;
    Ok(corpus_stats(&records)?)
}

/// Shortened contexts for every test record, without generation.
pub fn shorten_only(cfg: &RunConfig) -> Result<(Vec<ShortenedRecord>, Vec<Failure>), PipelineError> {
    cfg.validate()?;
    let records = load_records(cfg)?;
    let (backend, _) = build_backend(cfg, &records)?;
    let scorer = build_scorer(cfg.scorer, backend, cfg);
    let strategy = cfg.strategy();
    let pool = worker_pool(cfg.workers)?;
    let mut results: Vec<Result<ShortenedRecord, Failure>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                shorten(r, strategy, scorer.as_ref())
                    .map(|context| ShortenedRecord { record_id: r.id.clone(), context })
                    .map_err(|e| fail(r, Stage::Shorten, e.to_string(), is_backend_shorten(&e)))
            })
            .collect()
    });
    results.sort_by(|a, b| {
        let id = |x: &Result<ShortenedRecord, Failure>| match x {
            Ok(s) => s.record_id.clone(),
            Err(f) => f.record_id.clone(),
        };
        id(a).cmp(&id(b))
    });
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => ok.push(s),
            Err(f) => failures.push(f),
        }
    }
    Ok((ok, failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub strategy: StrategyKind,
    pub baseline: StrategyKind,
    /// Percentage change per metric, one decimal. Absent when a baseline
    /// metric is zero; `improvement_error` then says which.
    pub improvement_pct: Option<BTreeMap<String, f64>>,
    pub semantic_improvement_pct: Option<f64>,
    pub token_improvement_pct: Option<f64>,
    pub improvement_error: Option<String>,
    pub superior_sts_pct: f64,
    pub superior_rouge_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryProfileEntry {
    pub category: Category,
    pub total_pct: f64,
    pub best_k_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub metrics: Report,
    pub comparisons: Vec<ComparisonReport>,
    pub best_k: usize,
    /// Per strategy; absent when a strategy has fewer rows than `best_k`.
    pub category_profiles: BTreeMap<StrategyKind, Vec<CategoryProfileEntry>>,
}

/// Combines the `rows.csv` files of several runs; every non-baseline
/// strategy is compared against `B` when a `B` run is included.
pub fn report_runs(run_dirs: &[PathBuf], best_k: usize) -> Result<CombinedReport, PipelineError> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let path = dir.join(ROWS_FILE);
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        rows.extend(read_rows_csv(file)?);
    }
    let metrics = aggregate(&rows)?;
    let mut by_strategy: BTreeMap<StrategyKind, Vec<MetricRow>> = BTreeMap::new();
    for r in &rows {
        by_strategy.entry(r.strategy).or_default().push(r.clone());
    }
    let mut comparisons = Vec::new();
    if let Some(base_rows) = by_strategy.get(&StrategyKind::B) {
        let base = &metrics.strategies[&StrategyKind::B];
        for (kind, sr) in &metrics.strategies {
            if *kind == StrategyKind::B {
                continue;
            }
            let imp = improvement(sr, base);
            let (sts, rouge) = common_superiority(&by_strategy[kind], base_rows)?;
            let ok = imp.as_ref().ok();
            comparisons.push(ComparisonReport {
                strategy: *kind,
                baseline: StrategyKind::B,
                improvement_pct: ok.map(|i| i.per_metric.iter().map(|(k, v)| (k.clone(), round_half_up(*v, 1))).collect()),
                semantic_improvement_pct: ok.map(|i| round_half_up(i.semantic, 1)),
                token_improvement_pct: ok.map(|i| round_half_up(i.token, 1)),
                improvement_error: imp.as_ref().err().map(|e| e.to_string()),
                superior_sts_pct: round_half_up(sts, 1),
                superior_rouge_pct: round_half_up(rouge, 1),
            });
        }
    }
    let category_profiles = by_strategy
        .iter()
        .filter_map(|(kind, rs)| {
            let profile = best_k_category_profile(rs, best_k).ok()?;
            Some((
                *kind,
                profile
                    .into_iter()
                    .map(|s| CategoryProfileEntry {
                        category: s.category,
                        total_pct: round_half_up(s.total_pct, 1),
                        best_k_pct: round_half_up(s.best_k_pct, 1),
                    })
                    .collect(),
            ))
        })
        .collect();
    Ok(CombinedReport { metrics, comparisons, best_k, category_profiles })
}
