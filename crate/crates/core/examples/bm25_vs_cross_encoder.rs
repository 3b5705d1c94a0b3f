//! Ranks the paragraphs of one record with BM25 and with the backend's
//! relevance scorer, then reports how much the top-k selections agree.

use std::path::Path;
use std::sync::Arc;

use longqa::corpus::load_dataset;
use longqa::mockbackend::{MockBackend, MockConfig};
use longqa::scorer::{as_set, overlap_fraction, select_top_k, Bm25Scorer, CrossEncoderScorer, PassageScorer, ScoredUnit};

fn ranked(scorer: &dyn PassageScorer, question: &str, paragraphs: &[String]) -> Result<Vec<ScoredUnit>, Box<dyn std::error::Error>> {
    let scores = scorer.score(question, paragraphs)?;
    Ok(paragraphs
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(unit_index, (text, score))| ScoredUnit { unit_index, text: text.clone(), score })
        .collect())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let records = load_dataset(fixtures.join("planted.jsonl"))?;
    let mut mock = MockBackend::new(MockConfig::load(fixtures.join("planted_mock.toml"))?)?;
    mock.bind_records(&records)?;
    let backend: Arc<dyn longqa::backend::Backend> = Arc::new(mock);

    let bm25 = Bm25Scorer::default();
    let aps = CrossEncoderScorer { backend, model_id: "aps".into() };
    let k = 2;
    for record in records.iter().take(4) {
        let a = ranked(&aps, &record.question, &record.paragraphs)?;
        let b = ranked(&bm25, &record.question, &record.paragraphs)?;
        let top_a = select_top_k(&a, k);
        let top_b = select_top_k(&b, k);
        let overlap = overlap_fraction(&as_set(&top_a), &as_set(&top_b))?;
        println!("{}: relevance top-{k} {top_a:?}, bm25 top-{k} {top_b:?}, overlap {overlap:.2}", record.id);
        for u in &a {
            println!("    [{}] relevance {:.3}  bm25 {:.3}", u.unit_index, u.score, b[u.unit_index].score);
        }
    }
    Ok(())
}
