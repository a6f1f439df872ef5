//! Fixtures shared by the benchmarks in `benches/`.

use ridgematch_core::data::{synth_corpus, SynthConfig};
use ridgematch_core::metrics::ScoreSet;
use ridgematch_core::{Dataset, EncoderConfig, FusionConfig, Model};

/// Desk-scale model with a freshly initialized fusion module.
pub fn desk_model() -> Model {
    let mut model = Model::init(EncoderConfig::desk(), 0).expect("desk encoder");
    model.attach_fusion(FusionConfig::default(), 0).expect("fusion");
    model
}

/// `identities × 4 × 2` synthetic 32×32 images.
pub fn desk_corpus(identities: usize) -> Dataset {
    let c = synth_corpus(&SynthConfig {
        identities,
        ..SynthConfig::default()
    })
    .expect("corpus");
    Dataset::from_images(c.samples, &c.images, (32, 32)).expect("dataset")
}

/// Deterministic overlapping genuine/impostor scores from a low-discrepancy sequence.
pub fn score_set(genuine: usize, impostor: usize) -> ScoreSet {
    let frac = |k: usize| (k as f64 * 0.618_033_988_749_895).fract();
    let g = (0..genuine).map(|k| 0.3 + 0.7 * frac(k)).collect();
    let i = (0..impostor).map(|k| -0.5 + 0.9 * frac(k + genuine)).collect();
    ScoreSet::new(g, i).expect("non-empty")
}
