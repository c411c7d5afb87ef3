//! Acceptance suite. Prints one PASS/FAIL line per criterion with its runtime
//! against the budget, and exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{dspa, hand_fixture, random_fixture, s, stdout_json};
use dspa_core::diff_map::sparsify_threshold;
use dspa_core::flops::round_sig;
use dspa_core::gram::GramMatrix;
use dspa_core::steering::DEFAULT_RIDGE;
use dspa_core::theory::{
    check_concentration, check_demixing, check_factorization, synthetic_map, topk_sweep, ReferenceKind,
};
use dspa_core::{
    build_map, cost_report, demix_scores, edit_token, flops_dspa, flops_rahf, Activation, BuildOptions, CostConfig,
    DiffMap, Manifest, SaeParams, SteeringMode, SteeringPlan, SyntheticWorld,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn flop_reproduction() -> Outcome {
    let cfg = CostConfig::reference();
    let dspa = flops_dspa(&cfg);
    let rahf = flops_rahf(&cfg);
    let ratio = rahf.total / dspa;
    ensure!(round_sig(dspa, 3) == 8.00e13, "DSPA coefficient {dspa:e}");
    ensure!(round_sig(rahf.step1, 3) == 2.95e14, "step-1 coefficient {:e}", rahf.step1);
    ensure!(round_sig(rahf.step2, 3) == 6.29e13, "step-2 coefficient {:e}", rahf.step2);
    ensure!((ratio - 4.47).abs() <= 0.01, "ratio {ratio}");
    for n in [0.0, 7.0, 1e6] {
        let c = CostConfig { n_triples: n, ..cfg.clone() };
        ensure!(flops_dspa(&c) == 8e13 * n, "DSPA not linear in N at {n}");
        ensure!((cost_report(&c).unwrap().ratio - ratio).abs() < 1e-12, "ratio depends on N");
    }
    Ok(format!(
        "DSPA {:.3e}/N, step1 {:.3e}/N, step2 {:.3e}/N, ratio {ratio:.4}",
        dspa, rahf.step1, rahf.step2
    ))
}

const FACTORIZATION_WORLD: &str = r#"{"d": 32, "c": 1.0, "sigma": {"random": {"seed": 101}}, "b": {"random": {"seed": 202}},
    "gate_law": {"bernoulli_uniform": 0.3}, "noise_scale": 0.05}"#;

fn factorization() -> Outcome {
    let world = SyntheticWorld::from_json(FACTORIZATION_WORLD).unwrap();
    let noisy = check_factorization(&world, 20_000, 2024, 0.05).unwrap();
    ensure!(noisy.passed, "noisy error {} > 0.05", noisy.error);

    let quiet = SyntheticWorld::new(world.c, world.sigma.clone(), world.b.clone(), world.gate_law.clone(), 0.0, false).unwrap();
    let noiseless = check_factorization(&quiet, 100, 7, 1.0).unwrap();
    ensure!(
        noiseless.empirical_gram_error <= 1e-5,
        "noiseless error {} against the drawn gates",
        noiseless.empirical_gram_error
    );
    let fixed = SyntheticWorld::from_json(
        r#"{"d": 32, "sigma": {"random": {"seed": 101}}, "b": {"random": {"seed": 202}}, "gate_law": {"bernoulli_uniform": 1.0}}"#,
    )
    .unwrap();
    let exact = check_factorization(&fixed, 100, 7, 1e-5).unwrap();
    ensure!(exact.error <= 1e-5, "deterministic-gate error {}", exact.error);
    Ok(format!(
        "noisy {:.4} <= 0.05, noiseless {:.1e} (drawn gates), {:.1e} (all-on gates)",
        noisy.error, noiseless.empirical_gram_error, exact.error
    ))
}

const CONCENTRATION_WORLD: &str = r#"{"d": 256, "c": 1.0, "sigma": {"random": {"seed": 31, "scale": 0.5}},
    "b": {"random": {"seed": 32, "scale": 0.2}}, "gate_law": {"bernoulli_uniform": 0.05},
    "noise_scale": 0.5, "clip": true}"#;

fn concentration() -> Outcome {
    let world = SyntheticWorld::from_json(CONCENTRATION_WORLD).unwrap();
    let mut parts = Vec::new();
    for n_i in [50, 250] {
        let r = check_concentration(&world, 3, n_i, 500, 0.05, 77, Some(0.93)).unwrap();
        ensure!(r.reference == ReferenceKind::MonteCarlo, "expected Monte-Carlo reference");
        ensure!(r.passed, "coverage {} < 0.93 at N_i = {n_i}", r.coverage);
        parts.push(format!("N_i={n_i}: {:.3} (bound {:.4})", r.coverage, r.bound));
    }
    Ok(parts.join(", "))
}

fn topk_optimality() -> Outcome {
    let r = topk_sweep(1000, 12, 4, 4242).unwrap();
    ensure!(r.agreements == 1000, "{} of 1000 agree; first failure {:?}", r.agreements, r.failures.first());
    Ok("1000/1000 agree".into())
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn random_instance(rng: &mut ChaCha8Rng, defaults: bool) -> (SaeParams, SteeringPlan, Vec<f32>) {
    let d_model = rng.random_range(2..=16);
    let d_sae = if defaults { rng.random_range(32..=64) } else { rng.random_range(4..=48) };
    let v = |n: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
    let activation = match rng.random_range(0..3) {
        0 => Activation::Relu,
        1 => Activation::JumpRelu {
            theta: v(d_sae, 0.0, 0.5, rng),
        },
        _ => Activation::BatchTopK {
            k: rng.random_range(1..=d_sae),
        },
    };
    let bias_shift = if rng.random_bool(0.2) { -4.0 } else { 0.0 };
    let b_enc: Vec<f32> = v(d_sae, -0.5, 0.5, rng).into_iter().map(|b| b + bias_shift).collect();
    let sae = SaeParams::new(
        d_model,
        d_sae,
        v(d_sae * d_model, -1.0, 1.0, rng),
        b_enc,
        v(d_model * d_sae, -1.0, 1.0, rng),
        v(d_model, -0.2, 0.2, rng),
        activation,
    )
    .unwrap();
    let scores: Vec<f64> = (0..d_sae).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (k_diff, alpha, mode) = if defaults {
        (16, 0.2, SteeringMode::AblateOnly)
    } else {
        let alpha = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0f32..2.0) };
        let mode = [SteeringMode::AblateOnly, SteeringMode::AugmentOnly, SteeringMode::Both][rng.random_range(0..3)];
        (rng.random_range(1..=(d_sae / 2).min(16)), alpha, mode)
    };
    let plan = SteeringPlan::from_scores(vec![0], scores, k_diff, alpha, mode).unwrap();
    let h = v(d_model, -2.0, 2.0, rng);
    (sae, plan, h)
}

fn steering_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let (mut alpha_zero, mut inactive, mut edited, mut defaults) = (0, 0, 0, 0);
    for case in 0..10_000 {
        let use_defaults = case % 5 == 0;
        let (sae, plan, h) = random_instance(&mut rng, use_defaults);
        let (out, rep) = edit_token(&plan, &sae, &h, case).map_err(|e| format!("case {case}: {e}"))?;
        let f = sae.encode(&h).unwrap();

        let mut delta = vec![0.0f32; sae.d_sae()];
        for e in &rep.edits {
            ensure!(e.after >= 0.0, "case {case}: latent {} edited to {}", e.feature, e.after);
            ensure!(e.before > 0.0 && e.before == f.values()[e.feature], "case {case}: edited inactive latent");
            delta[e.feature] = e.after - e.before;
        }
        let mut selected: Vec<usize> = Vec::new();
        if plan.mode.augments() {
            selected.extend(&plan.augment);
        }
        if plan.mode.ablates() {
            selected.extend(&plan.ablate);
        }
        let any_active = selected.iter().any(|&j| f.values()[j] > 0.0);
        if plan.alpha == 0.0 || !any_active {
            ensure!(bits(&out) == bits(&h), "case {case}: no-op changed the hidden state");
            if plan.alpha == 0.0 {
                alpha_zero += 1;
            } else {
                inactive += 1;
            }
        }
        if delta.iter().any(|&x| x != 0.0) {
            edited += 1;
            let r = sae.decode_delta(&delta).unwrap();
            let want: Vec<f32> = h.iter().zip(&r).map(|(a, b)| a + b).collect();
            ensure!(bits(&out) == bits(&want), "case {case}: residual identity broken");
        } else {
            ensure!(bits(&out) == bits(&h), "case {case}: zero edit changed the hidden state");
        }
        if plan.mode == SteeringMode::AblateOnly {
            let changed = rep.edits.iter().filter(|e| e.after != e.before).count();
            ensure!(changed <= plan.ablate.len(), "case {case}: {changed} latents changed");
            if use_defaults {
                ensure!(changed <= 16, "case {case}: default configuration changed {changed} latents");
                defaults += 1;
            }
        }
    }
    ensure!(alpha_zero > 0 && inactive > 0 && edited > 0, "a branch was never exercised");
    Ok(format!(
        "10000 instances: {edited} edited, {alpha_zero} alpha=0, {inactive} inactive-selection, {defaults} default-config"
    ))
}

fn map_pipeline_golden() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fx = hand_fixture(dir.path());
    let map_a = dir.path().join("a.dspm");
    let map_b = dir.path().join("b.dspm");
    for (out, threads) in [(&map_a, "1"), (&map_b, "3")] {
        stdout_json(&dspa(&[
            "build-map",
            "--manifest",
            s(&fx.manifest),
            "--input-sae",
            s(&fx.input_sae),
            "--output-sae",
            s(&fx.output_sae),
            "--out",
            s(out),
            "--threads",
            threads,
        ]));
    }
    let map = DiffMap::read(&map_a).unwrap();
    ensure!(map.to_dense() == vec![vec![0.2f32, 0.2], vec![0.0, 0.3]], "map {:?}", map.to_dense());
    ensure!(
        std::fs::read(&map_a).unwrap() == std::fs::read(&map_b).unwrap(),
        "CLI rerun is not bit-identical"
    );

    let rows = vec![vec![0.5f32, 0.1, -0.4], vec![0.2, -0.3, 0.05], vec![0.0; 3]];
    let wide = dir.path().join("wide.dspm");
    let sparse = dir.path().join("wide.sparse.dspm");
    DiffMap::from_dense(&rows).unwrap().write(&wide).unwrap();
    stdout_json(&dspa(&["sparsify", "--map", s(&wide), "--k-diff", "1", "--out", s(&sparse)]));
    let after = DiffMap::read(&sparse).unwrap().to_dense();
    let mut dropped = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v != 0.0 && after[r][c] == 0.0 {
                dropped.push(v);
            }
            ensure!(after[r][c] == v || after[r][c] == 0.0, "sparsify changed a value");
        }
    }
    ensure!(dropped == vec![0.1, 0.05], "sparsify dropped {dropped:?}");
    ensure!(sparsify_threshold(&DiffMap::from_dense(&rows).unwrap(), 1).unwrap() == 0.2, "tau");

    let plan_path = dir.path().join("plan.jsonl");
    let edited = dir.path().join("edited.dspa");
    stdout_json(&dspa(&[
        "steer",
        "--map",
        s(&map_a),
        "--input-sae",
        s(&fx.input_sae),
        "--output-sae",
        s(&fx.output_sae),
        "--prompt-trace",
        s(&fx.prompts[1]),
        "--stream",
        s(&fx.chosen[1]),
        "--k-prompt",
        "2",
        "--k-diff",
        "1",
        "--out",
        s(&edited),
        "--plan-out",
        s(&plan_path),
    ]));
    let plan: SteeringPlan = serde_json::from_str(std::fs::read_to_string(&plan_path).unwrap().trim()).unwrap();
    ensure!(plan.augment == vec![1] && plan.ablate == vec![0], "plan {:?} / {:?}", plan.augment, plan.ablate);
    Ok("A = [[0.2, 0.2], [0, 0.3]], sparsify drops {0.1, 0.05}, augment {1} ablate {0}, rerun identical".into())
}

const DEMIX_WORLD: &str = r#"{"d": 12, "c": 0.8, "sigma": {"random": {"seed": 5}}, "b": {"random": {"seed": 6}},
    "gate_law": {"patterns": [
        {"weight": 0.20, "active": [0, 1]}, {"weight": 0.10, "active": [0]},
        {"weight": 0.15, "active": [1, 2]}, {"weight": 0.15, "active": [2, 3]},
        {"weight": 0.10, "active": [0, 1, 2, 3]}, {"weight": 0.10, "active": [3]},
        {"weight": 0.10, "active": [1]}, {"weight": 0.10, "active": []}]}}"#;

const DIAGONAL_WORLD: &str = r#"{"d": 8, "c": 1.2, "sigma": {"random": {"seed": 8}}, "b": {"random": {"seed": 9}},
    "gate_law": {"patterns": [{"weight": 0.2, "active": [0]}, {"weight": 0.3, "active": [1]},
                              {"weight": 0.1, "active": [2]}, {"weight": 0.4, "active": []}]}}"#;

fn demixing() -> Outcome {
    let world = SyntheticWorld::from_json(DEMIX_WORLD).unwrap();
    let r = check_demixing(&world, &[0, 1, 2, 3], 50_000, 99).unwrap();
    ensure!(r.cross_gram_norm == 0.0, "world couples S to its complement");
    ensure!(r.relative_error <= 0.01, "recovery error {}", r.relative_error);

    let diag = SyntheticWorld::from_json(DIAGONAL_WORLD).unwrap();
    let sm = synthetic_map(&diag, 20_000, 3).unwrap();
    let subset = [0usize, 1, 2];
    let support: Vec<f64> = subset
        .iter()
        .map(|&i| sm.gates.iter().filter(|g| g.0[i]).count() as f64 / sm.gates.len() as f64)
        .collect();
    let map = sm.map.finish(0).unwrap();
    let mut values = vec![0.0; 9];
    for a in 0..3 {
        values[a * 3 + a] = support[a];
    }
    let gram = GramMatrix {
        indices: subset.to_vec(),
        values,
    };
    let got = demix_scores(&map, &gram, &subset, &[1.0; 3], 0.0).unwrap();
    let dense = map.to_dense();
    let mut worst = 0.0f64;
    for j in 0..diag.d {
        let want: f64 = subset.iter().zip(&support).map(|(&i, p)| dense[i][j] as f64 / p).sum();
        worst = worst.max((got[j] - want).abs() / want.abs().max(1.0));
    }
    ensure!(worst <= 1e-6, "diagonal case differs by {worst}");
    let ridge = demix_scores(&map, &gram, &subset, &[1.0; 3], DEFAULT_RIDGE).unwrap();
    ensure!(ridge.iter().all(|x| x.is_finite()), "ridge solve");
    Ok(format!("recovery error {:.2e} at N = 50000, diagonal case {worst:.1e}", r.relative_error))
}

fn parallel_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let fx = random_fixture(dir.path(), 300, 8);
    let manifest = Manifest::open(&fx.manifest).unwrap();
    let input = SaeParams::load(&fx.input_sae).unwrap();
    let output = SaeParams::load(&fx.output_sae).unwrap();
    let mut files = Vec::new();
    for workers in [1, 2, 8] {
        let opts = BuildOptions {
            workers,
            ..BuildOptions::default()
        };
        let path = dir.path().join(format!("w{workers}.dspm"));
        build_map(&manifest, &input, &output, &opts).unwrap().write(&path).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    ensure!(files[0] == files[1] && files[0] == files[2], "library outputs differ across worker counts");
    for threads in ["1", "2", "8"] {
        let out = dir.path().join(format!("cli{threads}.dspm"));
        stdout_json(&dspa(&[
            "build-map",
            "--manifest",
            s(&fx.manifest),
            "--input-sae",
            s(&fx.input_sae),
            "--output-sae",
            s(&fx.output_sae),
            "--out",
            s(&out),
            "--threads",
            threads,
        ]));
        ensure!(std::fs::read(&out).unwrap() == files[0], "CLI with {threads} threads differs");
    }
    Ok(format!("300 triples, {} bytes identical for 1/2/8 workers (library and CLI)", files[0].len()))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "flop reproduction", budget: Duration::from_secs(1), run: flop_reproduction },
        Criterion { name: "factorization", budget: Duration::from_secs(60), run: factorization },
        Criterion { name: "concentration coverage", budget: Duration::from_secs(120), run: concentration },
        Criterion { name: "top-k optimality", budget: Duration::from_secs(30), run: topk_optimality },
        Criterion { name: "steering invariants", budget: Duration::from_secs(120), run: steering_invariants },
        Criterion { name: "map pipeline golden", budget: Duration::from_secs(60), run: map_pipeline_golden },
        Criterion { name: "de-mixing", budget: Duration::from_secs(60), run: demixing },
        Criterion { name: "parallel determinism", budget: Duration::from_secs(120), run: parallel_determinism },
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let timing = format!("{:.2}s of {}s", elapsed.as_secs_f64(), c.budget.as_secs());
        match outcome {
            Ok(detail) if elapsed <= c.budget => println!("PASS  {:<24} {detail} [{timing}]", c.name),
            Ok(detail) => {
                failed += 1;
                println!("FAIL  {:<24} over budget: {detail} [{timing}]", c.name);
            }
            Err(reason) => {
                failed += 1;
                println!("FAIL  {:<24} {reason} [{timing}]", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
