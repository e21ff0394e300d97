//! Random inputs shared by the benchmarks.

use awe_core::feats::FeatureSequence;
use awe_core::LabelledEmbedding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `n` embeddings of dimension `dim` spread over `words` types and `speakers` speakers.
pub fn labelled_embeddings(n: usize, dim: usize, words: usize, speakers: usize, seed: u64) -> Vec<LabelledEmbedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| LabelledEmbedding {
            z: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
            word_type: format!("w{}", i % words),
            speaker_id: format!("s{}", rng.random_range(0..speakers)),
        })
        .collect()
}

/// Utterances of Gaussian frames with lengths drawn from `lens`.
pub fn random_features(n: usize, dim: usize, lens: std::ops::Range<usize>, seed: u64) -> Vec<FeatureSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = rng.random_range(lens.clone());
            let data = (0..t * dim).map(|_| rng.sample(StandardNormal)).collect();
            FeatureSequence::new(format!("u{i:05}"), t, dim, data, 10.0).expect("valid shape")
        })
        .collect()
}
