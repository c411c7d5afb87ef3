use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use dspa_bench::{random_rows, random_sae, random_triples};
use dspa_core::{build_map, edit_token, sparsify, BuildOptions, SteeringMode, SteeringPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

const D_MODEL: usize = 256;
const D_SAE: usize = 2048;

fn encode(c: &mut Criterion) {
    let sae = random_sae(D_MODEL, D_SAE, 1);
    let rows = random_rows(64, D_MODEL, &mut ChaCha8Rng::seed_from_u64(2));
    let mut g = c.benchmark_group("sae");
    g.throughput(Throughput::Elements(rows.len() as u64));
    g.bench_function("encode_64_tokens", |b| {
        b.iter(|| {
            for h in &rows {
                black_box(sae.encode(h).unwrap());
            }
        })
    });
    g.finish();
}

fn map(c: &mut Criterion) {
    let input = random_sae(D_MODEL, D_SAE, 3);
    let output = random_sae(D_MODEL, D_SAE, 4);
    let triples = random_triples(32, D_MODEL, 5);
    let opts = BuildOptions::default();
    let mut g = c.benchmark_group("diff_map");
    g.sample_size(10);
    g.throughput(Throughput::Elements(triples.len() as u64));
    g.bench_function("build_32_triples", |b| {
        b.iter(|| black_box(build_map(triples.as_slice(), &input, &output, &opts).unwrap()))
    });
    let built = build_map(triples.as_slice(), &input, &output, &opts).unwrap();
    g.bench_function("sparsify", |b| {
        b.iter_batched(|| built.clone(), |m| black_box(sparsify(&m, 16).unwrap()), BatchSize::LargeInput)
    });
    g.finish();
}

fn steer(c: &mut Criterion) {
    let sae = random_sae(D_MODEL, D_SAE, 6);
    let scores: Vec<f64> = (0..D_SAE).map(|j| ((j * 7919) % D_SAE) as f64 - D_SAE as f64 / 2.0).collect();
    let plan = SteeringPlan::from_scores(vec![0], scores, 16, 0.2, SteeringMode::Both).unwrap();
    let rows = random_rows(64, D_MODEL, &mut ChaCha8Rng::seed_from_u64(7));
    c.bench_function("steering/edit_64_tokens", |b| {
        b.iter(|| {
            for (t, h) in rows.iter().enumerate() {
                black_box(edit_token(&plan, &sae, h, t).unwrap());
            }
        })
    });
}

criterion_group!(benches, encode, map, steer);
criterion_main!(benches);
