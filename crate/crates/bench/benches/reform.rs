use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use whittle_bench::{random_matrix, stride_mask, synthetic_gram};
use whittle_core::reform::{admm_reform, ReformProblem};

fn bench_admm(c: &mut Criterion) {
    let mut group = c.benchmark_group("admm_reform");
    for &n in &[16usize, 64, 128] {
        let problem = ReformProblem {
            w: random_matrix(64, n, 1),
            g: synthetic_gram(n, 4 * n, 2),
            pruned: stride_mask(n),
            rho: 1.0,
            iters: 30,
        };
        group.bench_with_input(BenchmarkId::new("cols", n), &problem, |b, p| {
            b.iter(|| admm_reform(p).unwrap())
        });
    }
    group.finish();
}

fn bench_iterations(c: &mut Criterion) {
    let mut group = c.benchmark_group("admm_iters");
    let base = ReformProblem {
        w: random_matrix(64, 64, 3),
        g: synthetic_gram(64, 256, 4),
        pruned: stride_mask(64),
        rho: 1.0,
        iters: 30,
    };
    for &iters in &[10usize, 30, 100] {
        let problem = ReformProblem { iters, ..base.clone() };
        group.bench_with_input(BenchmarkId::new("iters", iters), &problem, |b, p| {
            b.iter(|| admm_reform(p).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_admm, bench_iterations);
criterion_main!(benches);
