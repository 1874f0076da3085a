use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use whittle_bench::{toy_genome, toy_model, toy_space};
use whittle_core::genome::{mask_mutation, mutate_genome, MutationParams, SimilarityMode};
use whittle_core::util::derive_rng;
use whittle_core::SelectionMask;

fn bench_mask_mutation(c: &mut Criterion) {
    let mut group = c.benchmark_group("mask_mutation");
    for &n in &[16usize, 128, 1024] {
        let mask = SelectionMask::ones(n);
        group.bench_with_input(BenchmarkId::new("len", n), &mask, |b, m| {
            let mut rng = derive_rng(7, &["bench-mask"]);
            b.iter(|| mask_mutation(m, 1.0, 0.75, 0.8, 1000, SimilarityMode::default(), &mut rng))
        });
    }
    group.finish();
}

fn bench_genome_mutation(c: &mut Criterion) {
    let (config, _) = toy_model();
    let space = toy_space(&config);
    let genome = toy_genome(&config);
    let params = MutationParams { p_d: 0.1, p_s: 0.3, p_m: 0.6, alpha: 0.8, eta: 1000 };
    c.bench_function("mutate_genome", |b| {
        let mut rng = derive_rng(11, &["bench-genome"]);
        b.iter(|| mutate_genome(&genome, &params, &space, 1, &mut rng))
    });
}

criterion_group!(benches, bench_mask_mutation, bench_genome_mutation);
criterion_main!(benches);
