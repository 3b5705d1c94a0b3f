//! Pairwise judging of two runs with alternating option order.

use std::path::Path;

use longqa::pipeline::{read_jsonl, run_judge, run_pipeline, JudgeLogLine, RunConfig, JUDGE_LOG_FILE};
use longqa::shorten::StrategyKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let out = tempfile::tempdir()?;
    let config = |strategy| RunConfig {
        dataset: fixtures.join("planted.jsonl"),
        mock_config: Some(fixtures.join("planted_mock.toml")),
        strategy,
        out: out.path().to_path_buf(),
        cache_dir: None,
        ..RunConfig::default()
    };
    let a1 = run_pipeline(&config(StrategyKind::A1))?;
    let b = run_pipeline(&config(StrategyKind::B))?;

    // The mock judge prefers the longer option, i.e. the full-context echo.
    let judged = run_judge(&config(StrategyKind::A1), &a1.run_dir, &b.run_dir)?;
    let r = &judged.report;
    println!(
        "{} vs {}: {} decisive of {} items, A wins {:.1}%, B wins {:.1}%",
        r.strategy_a, r.strategy_b, r.decisive_items, r.common_items, r.wins_a_pct, r.wins_b_pct
    );
    let log: Vec<JudgeLogLine> = read_jsonl(&judged.run_dir.join(JUDGE_LOG_FILE))?;
    for line in log.iter().take(4) {
        println!(
            "  item {} ({}): option1={} option2={} reply={}",
            line.item_index, line.record_id, line.option1_source, line.option2_source, line.raw_reply
        );
    }
    Ok(())
}
