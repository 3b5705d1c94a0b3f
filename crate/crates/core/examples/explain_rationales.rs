//! Token rationales for a relevance scorer, and the coverage matrix that
//! summarizes many of them.

use longqa::explain::{
    coverage_matrix, shapley_rationale, surrogate_rationale, write_coverage_csv, Rationale, SurrogateParams,
    DEFAULT_PERMUTATIONS, DEFAULT_THRESHOLDS,
};
use longqa::mockbackend::{MockBackend, MockConfig};
use longqa::scorer::{CrossEncoderScorer, PassageScorer};
use std::sync::Arc;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = MockBackend::new(MockConfig {
        score_keywords: vec!["flood".into(), "rain".into()],
        score_keyword_weight: 0.2,
        ..MockConfig::default()
    })?;
    let scorer = CrossEncoderScorer { backend: Arc::new(backend), model_id: "aps".into() };
    let question = "why does the valley flood";
    let passages = [
        "heavy rain in the hills makes the valley flood",
        "the market opens early on sundays",
        "rain and more rain, then the flood",
    ];

    let params = SurrogateParams { n_samples: 500, ..SurrogateParams::default() };
    let mut rationales: Vec<Rationale> = Vec::new();
    for p in passages {
        let r = surrogate_rationale(question, p, &scorer as &dyn PassageScorer, &params, 0)?;
        println!("logit {:.2}: {}", r.logit, render(&r));
        rationales.push(r);
    }
    let exact = shapley_rationale(question, passages[2], &scorer, DEFAULT_PERMUTATIONS, 0)?;
    println!("\nshapley, {}: {}", passages[2], render(&exact));

    println!("\ncoverage (% of tokens above each threshold, per logit bucket):");
    write_coverage_csv(std::io::stdout(), &coverage_matrix(&rationales, &DEFAULT_THRESHOLDS)?)?;
    Ok(())
}

fn render(r: &Rationale) -> String {
    r.tokens
        .iter()
        .zip(&r.relevances)
        .map(|(t, v)| format!("{t}({v:+.2})"))
        .collect::<Vec<_>>()
        .join(" ")
}
