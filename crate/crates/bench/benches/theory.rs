use criterion::{criterion_group, criterion_main, Criterion};
use parity_curriculum::theory::{cp_bruteforce, cp_exact, cp_monte_carlo, solve_span_coefficients};
use parity_curriculum::rng::seeded;

fn cross_predictability(c: &mut Criterion) {
    let mut g = c.benchmark_group("cp");
    g.bench_function("exact_d100_k6", |b| b.iter(|| cp_exact(100, 6, 0.01, 0.98)));
    g.bench_function("bruteforce_d12_k4", |b| b.iter(|| cp_bruteforce(12, 4, 0.01, 0.98)));
    g.bench_function("monte_carlo_d100_k6_1e4", |b| {
        let mut rng = seeded(1);
        b.iter(|| cp_monte_carlo(100, 6, 0.01, 0.98, 10_000, &mut rng))
    });
    g.finish();
}

fn span(c: &mut Criterion) {
    c.bench_function("span_solve_d8_k3", |b| b.iter(|| solve_span_coefficients(8, 3)));
}

criterion_group!(benches, cross_predictability, span);
criterion_main!(benches);
