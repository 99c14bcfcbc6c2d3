//! Shared inputs for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsecontrast::config::RunConfig;
use sparsecontrast::diffcore::Tensor;
use sparsecontrast::synthdata::{generate, Dataset, SynthSpec};

/// `Q`, `K`, `V` of shape `L×d` plus a sorted random key set of size `k`.
pub struct AttentionInputs {
    pub q: Tensor<f32>,
    pub k: Tensor<f32>,
    pub v: Tensor<f32>,
    pub set: Vec<usize>,
}

pub fn attention_inputs(l: usize, k: usize, d: usize, seed: u64) -> AttentionInputs {
    assert!(k >= 1 && k <= l, "K must lie in [1, L]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Tensor::uniform(vec![l, d], 1.0, &mut rng);
    let kt = Tensor::uniform(vec![l, d], 1.0, &mut rng);
    let v = Tensor::uniform(vec![l, d], 1.0, &mut rng);
    let mut set = rand::seq::index::sample(&mut rng, l, k).into_vec();
    set.sort_unstable();
    AttentionInputs { q, k: kt, v, set }
}

/// Default-geometry dataset and config with the given batch size.
pub fn training_fixture(batch: usize, n_images: usize) -> (RunConfig, Dataset) {
    let cfg = RunConfig {
        batch,
        ..RunConfig::default()
    };
    let ds = generate(&SynthSpec {
        n_images,
        seed: 7,
        ..SynthSpec::default()
    })
    .expect("default spec is valid");
    (cfg, ds)
}
