use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use longqa::explain::Method;
use longqa::pipeline::{
    coverage_from_file, read_jsonl, report_runs, run_explain, run_judge, run_pipeline, shorten_only, AnswerRecord,
    ExplainMethod, JudgeLogLine, PipelineError, RationaleRecord, RunConfig, RunManifest, ANSWERS_FILE, COVERAGE_FILE,
    JUDGE_LOG_FILE, MANIFEST_FILE, RATIONALES_FILE, REPORT_FILE, ROWS_FILE, SHORTENED_FILE,
};
use longqa::shorten::{ScorerKind, StrategyKind};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn config(out: &Path, strategy: StrategyKind) -> RunConfig {
    RunConfig {
        dataset: fixture("planted.jsonl"),
        triples: Some(fixture("planted_triples.jsonl")),
        coref: Some(fixture("planted_coref.jsonl")),
        mock_config: Some(fixture("planted_mock.toml")),
        strategy,
        out: out.to_path_buf(),
        cache_dir: None,
        ..RunConfig::default()
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn r1_mean(run_dir: &Path, strategy: StrategyKind) -> f64 {
    let report: serde_json::Value = serde_json::from_slice(&read(&run_dir.join(REPORT_FILE))).unwrap();
    report["metrics"]["strategies"][strategy.to_string()]["means"]["r1"].as_f64().unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for strategy in [StrategyKind::B, StrategyKind::A1] {
        let first = run_pipeline(&config(a.path(), strategy)).unwrap();
        let mut cfg = config(b.path(), strategy);
        cfg.workers = 1;
        let second = run_pipeline(&cfg).unwrap();
        for file in [REPORT_FILE, ROWS_FILE, ANSWERS_FILE, SHORTENED_FILE] {
            assert_eq!(read(&first.run_dir.join(file)), read(&second.run_dir.join(file)), "{strategy} {file}");
        }
    }
}

#[test]
fn planted_selection_beats_full_context() {
    let out = tempfile::tempdir().unwrap();
    let b = run_pipeline(&config(out.path(), StrategyKind::B)).unwrap();
    let a1 = run_pipeline(&config(out.path(), StrategyKind::A1)).unwrap();
    assert_eq!(b.exit_code(), 0);
    assert_eq!(a1.exit_code(), 0);
    assert!(r1_mean(&a1.run_dir, StrategyKind::A1) > r1_mean(&b.run_dir, StrategyKind::B));

    let answers: Vec<AnswerRecord> = read_jsonl(&a1.run_dir.join(ANSWERS_FILE)).unwrap();
    assert_eq!(answers.len(), 20);
    assert!(answers.windows(2).all(|w| w[0].record_id < w[1].record_id));
    assert!(answers.iter().all(|a| a.selected_units.len() == 1));

    let overlap = a1.report.overlap.unwrap();
    assert_eq!(overlap.against, ScorerKind::Bm25);
    assert!((overlap.overlap + overlap.differed - 1.0).abs() < 1e-12);
    assert!(b.report.overlap.is_none());
}

#[test]
fn annotation_strategies_run() {
    let out = tempfile::tempdir().unwrap();
    for strategy in [StrategyKind::A2, StrategyKind::A3, StrategyKind::A4] {
        let outcome = run_pipeline(&config(out.path(), strategy)).unwrap();
        assert_eq!(outcome.report.records, 20, "{strategy}");
        assert_eq!(outcome.report.failures, 0, "{strategy}");
        assert_eq!(outcome.manifest.status, "complete");
    }
}

#[test]
fn annotation_strategies_without_annotations_fail_per_record() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config(out.path(), StrategyKind::A2);
    cfg.triples = None;
    let outcome = run_pipeline(&cfg).unwrap();
    assert_eq!(outcome.report.failures, 20);
    assert_eq!(outcome.exit_code(), 0);
    assert!(outcome.manifest.failures.iter().all(|f| !f.backend));
}

#[test]
fn manifest_records_config_and_refuses_reuse() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config(out.path(), StrategyKind::A1);
    let outcome = run_pipeline(&cfg).unwrap();
    assert_eq!(outcome.run_dir, out.path().join("A1-aps-k1-seed0"));
    let manifest = RunManifest::load(&outcome.run_dir).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.mock_seed, Some(7));
    assert_eq!(manifest.records, 20);
    assert!(manifest.finished_at.is_some());
    assert_eq!(manifest.dataset_sha256.len(), 64);

    match run_pipeline(&cfg) {
        Err(e @ PipelineError::RunExists(_)) => assert_eq!(e.exit_code(), 1),
        other => panic!("expected RunExists, got {other:?}"),
    }
}

#[test]
fn cache_makes_second_run_identical() {
    let out = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let mut cfg = config(out.path(), StrategyKind::A1);
    cfg.cache_dir = Some(cache.path().to_path_buf());
    let first = run_pipeline(&cfg).unwrap();
    cfg.run_id = Some("again".into());
    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(read(&first.run_dir.join(REPORT_FILE)), read(&second.run_dir.join(REPORT_FILE)));
    assert!(fs::read_dir(cache.path().join("score")).unwrap().count() > 0);
}

#[test]
fn shorten_only_matches_run_output() {
    let out = tempfile::tempdir().unwrap();
    let cfg = config(out.path(), StrategyKind::A1);
    let (shortened, failures) = shorten_only(&cfg).unwrap();
    assert!(failures.is_empty());
    let outcome = run_pipeline(&cfg).unwrap();
    let written: Vec<longqa::pipeline::ShortenedRecord> = read_jsonl(&outcome.run_dir.join(SHORTENED_FILE)).unwrap();
    assert_eq!(shortened, written);
}

#[test]
fn judge_prefers_longer_answers_with_parity() {
    let out = tempfile::tempdir().unwrap();
    let b = run_pipeline(&config(out.path(), StrategyKind::B)).unwrap();
    let a1 = run_pipeline(&config(out.path(), StrategyKind::A1)).unwrap();
    let cfg = config(out.path(), StrategyKind::B);

    // Full-context echoes are always longer than the single planted paragraph.
    let judged = run_judge(&cfg, &b.run_dir, &a1.run_dir).unwrap();
    assert_eq!(judged.report.common_items, 20);
    assert_eq!(judged.report.decisive_items, 20);
    assert_eq!(judged.report.wins_a_pct, 100.0);
    assert_eq!(judged.report.wins_b_pct, 0.0);
    assert!(!judged.report.no_decisive_items);

    let log: Vec<JudgeLogLine> = read_jsonl(&judged.run_dir.join(JUDGE_LOG_FILE)).unwrap();
    assert_eq!(log.len(), 20);
    for line in &log {
        let (first, second) = if line.item_index % 2 == 0 {
            (StrategyKind::B, StrategyKind::A1)
        } else {
            (StrategyKind::A1, StrategyKind::B)
        };
        assert_eq!((line.option1_source, line.option2_source), (first, second));
        let expected = if line.item_index % 2 == 0 { "option1" } else { "option2" };
        assert_eq!(line.raw_reply, expected);
    }
    let manifest = RunManifest::load(&judged.run_dir).unwrap();
    assert_eq!(manifest.inputs, vec![b.run_dir.clone(), a1.run_dir.clone()]);
}

#[test]
fn judging_a_run_against_itself_has_no_decisive_items() {
    let out = tempfile::tempdir().unwrap();
    let a1 = run_pipeline(&config(out.path(), StrategyKind::A1)).unwrap();
    let judged = run_judge(&config(out.path(), StrategyKind::A1), &a1.run_dir, &a1.run_dir).unwrap();
    assert_eq!(judged.report.tie_items, 20);
    assert_eq!(judged.report.decisive_items, 0);
    assert!(judged.report.no_decisive_items);
    assert_eq!((judged.report.wins_a_pct, judged.report.wins_b_pct), (0.0, 0.0));
}

fn keyword_mock(dir: &Path) -> PathBuf {
    let path = dir.join("keywords.toml");
    fs::write(
        &path,
        "seed = 3\nscore_keywords = [\"कारण\", \"क्योंकि\", \"परिणाम\"]\nscore_keyword_weight = 0.05\n",
    )
    .unwrap();
    path
}

#[test]
fn explain_writes_rationales_and_coverage() {
    let out = tempfile::tempdir().unwrap();
    let a1 = run_pipeline(&config(out.path(), StrategyKind::A1)).unwrap();
    let mut cfg = config(out.path(), StrategyKind::A1);
    cfg.mock_config = Some(keyword_mock(out.path()));
    cfg.explain_samples = 300;
    cfg.explain_limit = Some(3);
    let explained = run_explain(&cfg, &a1.run_dir).unwrap();
    assert_eq!(explained.rationales, 3);

    let lines: Vec<RationaleRecord> = read_jsonl(&explained.run_dir.join(RATIONALES_FILE)).unwrap();
    assert_eq!(lines.len(), 3);
    let first = &lines[0];
    assert_eq!(first.record_id, "hi-000");
    assert_eq!(first.rationale.method, Method::Surrogate);
    assert_eq!(first.rationale.tokens.len(), first.rationale.relevances.len());
    // Keyword tokens drive the keyword-density scorer; they should outrank the rest.
    let keyword_rel: Vec<f64> = first
        .rationale
        .tokens
        .iter()
        .zip(&first.rationale.relevances)
        .filter(|(t, _)| ["कारण", "क्योंकि", "परिणाम"].contains(&t.as_str()))
        .map(|(_, r)| *r)
        .collect();
    let other_max = first
        .rationale
        .tokens
        .iter()
        .zip(&first.rationale.relevances)
        .filter(|(t, _)| !["कारण", "क्योंकि", "परिणाम"].contains(&t.as_str()))
        .map(|(_, r)| *r)
        .fold(f64::MIN, f64::max);
    assert!(!keyword_rel.is_empty());
    assert!(keyword_rel.iter().all(|&r| r > other_max), "{keyword_rel:?} vs {other_max}");

    let csv = String::from_utf8(read(&explained.run_dir.join(COVERAGE_FILE))).unwrap();
    assert!(csv.starts_with("bucket,count,0.1,0.2"));
    assert_eq!(csv.lines().count(), 11);

    // Same seed, same rationales.
    cfg.run_id = Some("explain-again".into());
    let again = run_explain(&cfg, &a1.run_dir).unwrap();
    assert_eq!(read(&explained.run_dir.join(RATIONALES_FILE)), read(&again.run_dir.join(RATIONALES_FILE)));
}

#[test]
fn shapley_explain_runs() {
    let out = tempfile::tempdir().unwrap();
    let a1 = run_pipeline(&config(out.path(), StrategyKind::A1)).unwrap();
    let mut cfg = config(out.path(), StrategyKind::A1);
    cfg.mock_config = Some(keyword_mock(out.path()));
    cfg.explain_method = ExplainMethod::Shapley;
    cfg.explain_limit = Some(1);
    let explained = run_explain(&cfg, &a1.run_dir).unwrap();
    let lines: Vec<RationaleRecord> = read_jsonl(&explained.run_dir.join(RATIONALES_FILE)).unwrap();
    assert_eq!(lines[0].rationale.method, Method::Shapley);
}

#[test]
fn explain_refuses_baseline_runs() {
    let out = tempfile::tempdir().unwrap();
    let b = run_pipeline(&config(out.path(), StrategyKind::B)).unwrap();
    assert!(matches!(run_explain(&config(out.path(), StrategyKind::B), &b.run_dir), Err(PipelineError::Config(_))));
}

#[test]
fn coverage_of_example_rationale() {
    let (matrix, trend) = coverage_from_file(&fixture("rationale_example.jsonl")).unwrap();
    assert_eq!(matrix.cell(30, 0.5), Some(70.0));
    assert_eq!(matrix.buckets[3].count, 1);
    assert_eq!(trend.occupied_buckets, 1);
    assert!(trend.non_decreasing.is_none());
}

#[test]
fn combined_report_compares_against_baseline() {
    let out = tempfile::tempdir().unwrap();
    let b = run_pipeline(&config(out.path(), StrategyKind::B)).unwrap();
    let a1 = run_pipeline(&config(out.path(), StrategyKind::A1)).unwrap();
    let report = report_runs(&[b.run_dir.clone(), a1.run_dir.clone()], 10).unwrap();
    assert_eq!(report.comparisons.len(), 1);
    let c = &report.comparisons[0];
    assert_eq!((c.strategy, c.baseline), (StrategyKind::A1, StrategyKind::B));
    assert!(c.improvement_pct.as_ref().unwrap()["r1"] > 0.0);
    assert_eq!(c.superior_rouge_pct, 100.0);
    for entries in report.category_profiles.values() {
        let total: f64 = entries.iter().map(|e| e.total_pct).sum();
        assert!((total - 100.0).abs() < 0.5, "{total}");
    }
}

// CLI exit codes.

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_longqa"));
    c.env_remove("LONGQA_BACKEND_URL").env_remove("LONGQA_API_KEY");
    c
}

#[test]
fn cli_run_succeeds_and_writes_run_dir() {
    let out = tempfile::tempdir().unwrap();
    let status = cli()
        .args(["run", "--strategy", "a1", "--no-cache", "--dataset"])
        .arg(fixture("planted.jsonl"))
        .arg("--mock-config")
        .arg(fixture("planted_mock.toml"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(out.path().join("A1-aps-k1-seed0").join(MANIFEST_FILE).exists());
}

#[test]
fn cli_config_errors_exit_1() {
    let out = tempfile::tempdir().unwrap();
    let missing_dataset = cli().args(["run", "--no-cache", "--out"]).arg(out.path()).output().unwrap();
    assert_eq!(missing_dataset.status.code(), Some(1));
    let bad_path = cli()
        .args(["run", "--no-cache", "--dataset", "/nonexistent/data.jsonl", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(bad_path.status.code(), Some(1));
    let shim_without_url = cli()
        .args(["run", "--no-cache", "--backend", "shim", "--dataset"])
        .arg(fixture("planted.jsonl"))
        .arg("--out")
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(shim_without_url.status.code(), Some(1));
}

#[test]
fn cli_unreachable_backend_exits_2() {
    let out = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let cfg_path = out.path().join("run.toml");
    fs::write(&cfg_path, "retry_attempts = 2\nretry_base_delay_ms = 1\nbackend = \"shim\"\n").unwrap();
    let output = cli()
        .arg("run")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--dataset")
        .arg(fixture("planted.jsonl"))
        .args(["--no-cache", "--backend-url", &url, "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
    let manifest = RunManifest::load(&out.path().join("B-seed0")).unwrap();
    assert_eq!(manifest.backend_failures(), 20);
    assert!(manifest.backend_identity.starts_with("shim:"));
}

#[test]
fn cli_ingest_and_report() {
    let out = tempfile::tempdir().unwrap();
    let ingest = cli()
        .args(["ingest", "--dataset"])
        .arg(fixture("planted.jsonl"))
        .arg("--triples")
        .arg(fixture("planted_triples.jsonl"))
        .arg("--coref")
        .arg(fixture("planted_coref.jsonl"))
        .output()
        .unwrap();
    assert_eq!(ingest.status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_slice(&ingest.stdout).unwrap();
    assert_eq!(stats["record_count"], 22);

    let b = run_pipeline(&config(out.path(), StrategyKind::B)).unwrap();
    let report = cli().arg("report").arg(&b.run_dir).output().unwrap();
    assert_eq!(report.status.code(), Some(0));
    let value: serde_json::Value = serde_json::from_slice(&report.stdout).unwrap();
    assert!(value["metrics"]["strategies"]["B"]["means"]["r1"].is_number());
}
