//! The composite semantic similarity, in both averaging modes.

use longqa::metrics::{combine_components, sts_mute, MeanMode, SemanticModels};
use longqa::mockbackend::{MockBackend, MockConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let backend = MockBackend::new(MockConfig { embed_dim: 32, ..MockConfig::default() })?;
    let models = SemanticModels::default();
    let reference = "नदी हर साल बाढ़ लाती है";
    for hypothesis in ["नदी हर साल बाढ़ लाती है", "हर साल नदी में बाढ़ आती है"] {
        for mode in [MeanMode::Arithmetic, MeanMode::Harmonic] {
            match sts_mute(reference, hypothesis, &backend, &models, mode) {
                Ok(s) => println!(
                    "{hypothesis} [{mode:?}]: bertscore {:.3}, use {:.3}, labse {:.3}, laser {:.3} -> {:.3}",
                    s.bertscore_f1, s.cos_use, s.cos_labse, s.cos_laser, s.sts_mute
                ),
                Err(e) => println!("{hypothesis} [{mode:?}]: {e}"),
            }
        }
    }

    let components = [0.6, 0.7, 0.8, 0.9];
    println!(
        "\ncomponents {components:?}: arithmetic {:.4}, harmonic {:.4}",
        combine_components(components, MeanMode::Arithmetic)?,
        combine_components(components, MeanMode::Harmonic)?
    );
    Ok(())
}
