use std::collections::HashSet;

use ridgematch_core::data::{
    identity_labels, make_batch, michelson_contrast, render_fingerprint, synth_corpus, synth_identity, BatchConfig,
    SynthConfig,
};
use ridgematch_core::rng::derive_key;
use ridgematch_core::Modality;

#[test]
fn contactless_contrast_is_lower_over_100_renders() {
    for k in 0..100u64 {
        let id = synth_identity(derive_key(11, "identity", &[k]));
        let cl = michelson_contrast(&render_fingerprint(&id, Modality::Cl, k, 32, 32));
        let cb = michelson_contrast(&render_fingerprint(&id, Modality::Cb, k, 32, 32));
        assert!(cl < cb, "render {k}: CL {cl} >= CB {cb}");
    }
}

#[test]
fn distinct_identity_seeds_give_distinct_params() {
    let params: Vec<_> = (0..1000u64).map(synth_identity).collect();
    for i in 0..params.len() {
        for j in i + 1..params.len() {
            assert_ne!(params[i], params[j], "seeds {i} and {j}");
        }
    }
}

#[test]
fn distinct_identities_render_differently() {
    let ids: Vec<_> = (0..50u64)
        .map(|k| synth_identity(derive_key(3, "identity", &[k])))
        .collect();
    for m in [Modality::Cl, Modality::Cb] {
        let renders: Vec<Vec<u8>> = ids
            .iter()
            .map(|id| render_fingerprint(id, m, 0, 32, 32).to_u8())
            .collect();
        let unique: HashSet<_> = renders.iter().collect();
        assert_eq!(unique.len(), renders.len(), "{m}: pixelwise collision");
    }
}

#[test]
fn corpus_is_a_pure_function_of_the_seed() {
    let cfg = SynthConfig {
        identities: 4,
        samples_per_modality: 2,
        seed: 9,
        ..SynthConfig::default()
    };
    let (a, b) = (synth_corpus(&cfg).unwrap(), synth_corpus(&cfg).unwrap());
    assert_eq!(a.samples, b.samples);
    for (x, y) in a.images.iter().zip(&b.images) {
        assert_eq!(x.png_bytes().unwrap(), y.png_bytes().unwrap());
        assert!(x.pixels().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn every_epoch_covers_every_identity() {
    let cfg = SynthConfig {
        identities: 9,
        samples_per_modality: 5,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&cfg).unwrap();
    let labels = identity_labels(&corpus.samples);
    for epoch_seed in 0..50 {
        let batches = make_batch(&corpus.samples, BatchConfig::default(), epoch_seed).unwrap();
        let mut seen = vec![0usize; 9];
        for b in &batches {
            assert_eq!(b.indices.len(), b.identity_labels.len());
            assert_eq!(b.indices.len(), b.modalities.len());
            assert!(b.modalities.contains(&Modality::Cl) && b.modalities.contains(&Modality::Cb));
            let ids: HashSet<_> = b.identity_labels.iter().collect();
            assert!(ids.len() >= 2);
            for (&i, &l) in b.indices.iter().zip(&b.identity_labels) {
                assert_eq!(labels[i], l);
                assert_eq!(
                    corpus.samples[i].modality,
                    b.modalities[b.indices.iter().position(|&x| x == i).unwrap()]
                );
                seen[l] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c >= 1), "epoch {epoch_seed}: {seen:?}");
    }
}
