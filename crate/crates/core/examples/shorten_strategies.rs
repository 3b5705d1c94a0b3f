//! Applies every shortening strategy to one annotated record.

use std::path::Path;
use std::sync::Arc;

use longqa::corpus::{attach_annotations, load_dataset};
use longqa::mockbackend::{MockBackend, MockConfig};
use longqa::scorer::CrossEncoderScorer;
use longqa::shorten::{shorten, ScorerKind, Strategy, StrategyKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let records = attach_annotations(
        load_dataset(fixtures.join("planted.jsonl"))?,
        Some(&fixtures.join("planted_triples.jsonl")),
        Some(&fixtures.join("planted_coref.jsonl")),
    )?;
    let mut mock = MockBackend::new(MockConfig::load(fixtures.join("planted_mock.toml"))?)?;
    mock.bind_records(&records)?;
    let scorer = CrossEncoderScorer { backend: Arc::new(mock), model_id: "aps".into() };

    let record = &records[0];
    println!("{} ({} paragraphs, {} tokens)", record.id, record.paragraphs.len(), record.context_tokens());
    println!("question: {}\n", record.question);
    for kind in StrategyKind::ALL {
        let short = shorten(record, Strategy::new(kind, ScorerKind::Aps, 1), &scorer)?;
        println!("== {kind}: {} tokens, units {:?}", short.token_count, short.selected_indices());
        for unit in &short.units {
            let preview: String = unit.text.chars().take(90).collect();
            println!("   {:?} #{}: {preview}...", unit.origin, unit.unit_index);
        }
    }
    Ok(())
}
