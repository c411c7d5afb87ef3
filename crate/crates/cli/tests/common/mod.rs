#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dspa_core::trace::ManifestEntry;
use dspa_core::{write_trace, Activation, ActivationTrace, Manifest, SaeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dspa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dspa"))
        .args(args)
        .env_remove("DSPA_THREADS")
        .output()
        .expect("run dspa")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "dspa failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub struct Fixture {
    pub manifest: PathBuf,
    pub input_sae: PathBuf,
    pub output_sae: PathBuf,
    pub prompts: Vec<PathBuf>,
    pub chosen: Vec<PathBuf>,
}

fn write_triples(dir: &Path, triples: Vec<(ActivationTrace, ActivationTrace, ActivationTrace)>) -> (PathBuf, Vec<PathBuf>, Vec<PathBuf>) {
    let mut entries = Vec::new();
    let (mut prompts, mut chosen) = (Vec::new(), Vec::new());
    for (k, (p, c, r)) in triples.into_iter().enumerate() {
        let names = [format!("t{k}.prompt.dspa"), format!("t{k}.chosen.dspa"), format!("t{k}.rejected.dspa")];
        write_trace(&p, &dir.join(&names[0])).unwrap();
        write_trace(&c, &dir.join(&names[1])).unwrap();
        write_trace(&r, &dir.join(&names[2])).unwrap();
        prompts.push(dir.join(&names[0]));
        chosen.push(dir.join(&names[1]));
        entries.push(ManifestEntry {
            triple_id: format!("t{k}"),
            prompt: names[0].clone().into(),
            chosen: names[1].clone().into(),
            rejected: names[2].clone().into(),
        });
    }
    let manifest = dir.join("manifest.json");
    Manifest::from_entries(dir, entries).write(&manifest).unwrap();
    (manifest, prompts, chosen)
}

fn response(prompt: &[Vec<f32>], t: usize, active: [usize; 2]) -> ActivationTrace {
    let mut rows = prompt.to_vec();
    for s in 0..t {
        rows.push(vec![
            if s < active[0] { 1.0 } else { -1.0 },
            if s < active[1] { 1.0 } else { -1.0 },
        ]);
    }
    ActivationTrace::from_rows("output:L1", prompt.len(), &rows).unwrap()
}

/// Two triples over identity 2-wide SAEs whose map is [[0.2, 0.2], [0.0, 0.3]].
pub fn hand_fixture(dir: &Path) -> Fixture {
    let p1 = vec![vec![1.0, -1.0], vec![1.0, -1.0]];
    let p2 = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
    let prompt = |rows: &Vec<Vec<f32>>| ActivationTrace::from_rows("input:L0", rows.len(), rows).unwrap();
    let triples = vec![
        (prompt(&p1), response(&p1, 5, [2, 0]), response(&p1, 5, [0, 1])),
        (prompt(&p2), response(&p2, 5, [0, 3]), response(&p2, 5, [0, 0])),
    ];
    let (manifest, prompts, chosen) = write_triples(dir, triples);
    let sae = SaeParams::identity(2, Activation::Relu).unwrap();
    let (input_sae, output_sae) = (dir.join("in.sae"), dir.join("out.sae"));
    sae.save(&input_sae).unwrap();
    sae.save(&output_sae).unwrap();
    Fixture { manifest, input_sae, output_sae, prompts, chosen }
}

pub fn random_sae(d_model: usize, d_sae: usize, rng: &mut ChaCha8Rng) -> SaeParams {
    let mut v = |n: usize, lo: f32, hi: f32| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f32>>();
    SaeParams::new(
        d_model,
        d_sae,
        v(d_sae * d_model, -1.0, 1.0),
        v(d_sae, -0.6, 0.2),
        v(d_model * d_sae, -1.0, 1.0),
        v(d_model, -0.1, 0.1),
        Activation::Relu,
    )
    .unwrap()
}

/// `n` random triples over random 8 -> 16 ReLU SAEs.
pub fn random_fixture(dir: &Path, n: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_model, d_sae) = (8, 16);
    let rows = |t: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
        (0..t).map(|_| (0..d_model).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
    };
    let mut triples = Vec::new();
    for _ in 0..n {
        let tx = rng.random_range(2..7);
        let p = rows(tx, &mut rng);
        let mut c = p.clone();
        let tc = rng.random_range(1..9);
        c.extend(rows(tc, &mut rng));
        let mut r = p.clone();
        let tr = rng.random_range(1..9);
        r.extend(rows(tr, &mut rng));
        triples.push((
            ActivationTrace::from_rows("input:L3", tx, &p).unwrap(),
            ActivationTrace::from_rows("output:L9", tx, &c).unwrap(),
            ActivationTrace::from_rows("output:L9", tx, &r).unwrap(),
        ));
    }
    let (manifest, prompts, chosen) = write_triples(dir, triples);
    let (input_sae, output_sae) = (dir.join("in.sae"), dir.join("out.sae"));
    random_sae(d_model, d_sae, &mut rng).save(&input_sae).unwrap();
    random_sae(d_model, d_sae, &mut rng).save(&output_sae).unwrap();
    Fixture { manifest, input_sae, output_sae, prompts, chosen }
}
