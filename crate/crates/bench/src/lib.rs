//! Synthetic inputs for the benchmarks.

use dspa_core::{Activation, ActivationTrace, PreferenceTriple, SaeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_sae(d_model: usize, d_sae: usize, seed: u64) -> SaeParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
    let scale = 1.0 / (d_model as f32).sqrt();
    SaeParams::new(
        d_model,
        d_sae,
        v(d_sae * d_model, -scale, scale),
        v(d_sae, -0.2, 0.05),
        v(d_model * d_sae, -scale, scale),
        v(d_model, -0.1, 0.1),
        Activation::Relu,
    )
    .unwrap()
}

pub fn random_rows(tokens: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..tokens)
        .map(|_| (0..d_model).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

/// `n` triples with 16-token prompts and 32-token responses.
pub fn random_triples(n: usize, d_model: usize, seed: u64) -> Vec<PreferenceTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tx, ty) = (16, 32);
    (0..n)
        .map(|k| {
            let prompt = random_rows(tx, d_model, &mut rng);
            let mut chosen = prompt.clone();
            chosen.extend(random_rows(ty, d_model, &mut rng));
            let mut rejected = prompt.clone();
            rejected.extend(random_rows(ty, d_model, &mut rng));
            PreferenceTriple::new(
                format!("t{k}"),
                ActivationTrace::from_rows("input", tx, &prompt).unwrap(),
                ActivationTrace::from_rows("output", tx, &chosen).unwrap(),
                ActivationTrace::from_rows("output", tx, &rejected).unwrap(),
            )
            .unwrap()
        })
        .collect()
}
