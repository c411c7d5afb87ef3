//! Ten independent repetitions of the d = 32 factorization setup. The
//! acceptance bound of 0.05 must sit well above every observed error.

use dspa_core::theory::{check_factorization, SyntheticWorld};

pub const WORLD: &str = r#"{"d": 32, "c": 1.0, "sigma": {"random": {"seed": 101}}, "b": {"random": {"seed": 202}},
    "gate_law": {"bernoulli_uniform": 0.3}, "noise_scale": 0.05}"#;

#[test]
fn ten_repetitions_stay_under_bound() {
    let world = SyntheticWorld::from_json(WORLD).unwrap();
    let errors: Vec<f64> = (0..10)
        .map(|r| check_factorization(&world, 20_000, 500 + r, 0.05).unwrap().error)
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let max = errors.iter().cloned().fold(0.0, f64::max);
    println!("factorization errors: {errors:?} (mean {mean:.5}, max {max:.5})");
    assert!(max <= 0.05);
    assert!(max <= 2.0 * mean);
}
