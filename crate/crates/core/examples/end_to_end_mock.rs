//! Full-context and shortened runs over the planted fixture, then a
//! combined report. Everything runs against the deterministic mock backend.

use std::path::Path;

use longqa::pipeline::{report_runs, run_pipeline, RunConfig};
use longqa::shorten::StrategyKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let out = tempfile::tempdir()?;
    let mut dirs = Vec::new();
    for strategy in StrategyKind::ALL {
        let cfg = RunConfig {
            dataset: fixtures.join("planted.jsonl"),
            triples: Some(fixtures.join("planted_triples.jsonl")),
            coref: Some(fixtures.join("planted_coref.jsonl")),
            mock_config: Some(fixtures.join("planted_mock.toml")),
            strategy,
            out: out.path().to_path_buf(),
            cache_dir: None,
            ..RunConfig::default()
        };
        let outcome = run_pipeline(&cfg)?;
        let means = &outcome.report.metrics.as_ref().expect("metrics").strategies[&strategy].means;
        let overlap = outcome
            .report
            .overlap
            .as_ref()
            .map_or(String::from("-"), |o| format!("{:.2}", o.overlap));
        println!(
            "{strategy:<3} records {:>2}  failures {}  R1 {:.3}  STS-MuTe {:.3}  overlap vs bm25 {overlap}",
            outcome.report.records, outcome.report.failures, means["r1"], means["sts_mute"]
        );
        dirs.push(outcome.run_dir);
    }

    let combined = report_runs(&dirs, 10)?;
    for c in &combined.comparisons {
        match (&c.semantic_improvement_pct, &c.improvement_error) {
            (Some(s), _) => println!("{} vs {}: semantic {s:+.1}%, token {:+.1}%", c.strategy, c.baseline, c.token_improvement_pct.unwrap_or(0.0)),
            (None, Some(e)) => println!("{} vs {}: {e}", c.strategy, c.baseline),
            _ => {}
        }
    }
    Ok(())
}
