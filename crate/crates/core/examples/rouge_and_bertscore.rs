//! Lexical and token-embedding overlap between a reference and a hypothesis.

use longqa::metrics::{bertscore, RougeScores};
use longqa::mockbackend::{MockBackend, MockConfig};
use longqa::textproc::tokenize_words;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reference = "the river floods every spring because the snow melts";
    let hypotheses = [
        "the river floods every spring because the snow melts",
        "every spring the snow melts and the river floods",
        "prices went up last year",
    ];
    let backend = MockBackend::new(MockConfig::default())?;
    let ref_tokens = tokenize_words(reference);
    let ref_vectors = backend.mock_embed_tokens("mbert", reference).vectors;

    println!("{:<55} {:>6} {:>6} {:>6} {:>6} {:>9}", "hypothesis", "R1", "R2", "R3", "RL", "BERTScore");
    for hyp in hypotheses {
        let rouge = RougeScores::compute(&ref_tokens, &tokenize_words(hyp));
        let bert = bertscore(&ref_vectors, &backend.mock_embed_tokens("mbert", hyp).vectors)?;
        println!(
            "{hyp:<55} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>9.3}",
            rouge.r1.f1, rouge.r2.f1, rouge.r3.f1, rouge.rl.f1, bert.f1
        );
    }
    Ok(())
}
