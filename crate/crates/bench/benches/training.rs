use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use parity_curriculum::data::{sample_into, MixtureParams};
use parity_curriculum::optimizer::{apply_mean_gradient, batch_gradient};
use parity_curriculum::rng::seeded;
use parity_curriculum::{Activation, LossKind, MlpNet, Network, NoisySgdConfig, ParamMask, TwoLayerNet};

fn batch(d: usize, b: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let params = MixtureParams::new(0.1, 0.98, d).unwrap();
    let mut rng = seeded(seed);
    let mut xs = Vec::with_capacity(b * d);
    let mut ys = Vec::with_capacity(b);
    let mut x = vec![0i8; d];
    for _ in 0..b {
        sample_into(&params, &mut rng, &mut x);
        ys.push(x[..4].iter().map(|&v| v as f64).product());
        xs.extend(x.iter().map(|&v| v as f64));
    }
    (xs, ys)
}

fn gradients(c: &mut Criterion) {
    let (xs, ys) = batch(50, 64, 1);
    let mut rng = seeded(2);
    let mlp = MlpNet::pytorch_init(&MlpNet::small_dims(50), &mut rng).unwrap();
    let two = TwoLayerNet::uniform_init(512, 50, Activation::Relu, &mut rng).unwrap();
    let mut g = c.benchmark_group("batch_gradient_b64_d50");
    g.bench_function("mlp_small", |b| {
        let mask = ParamMask::all(mlp.params().len());
        b.iter(|| batch_gradient(&mlp, &xs, &ys, LossKind::L2, None, &mask))
    });
    g.bench_function("two_layer_512", |b| {
        let mask = ParamMask::all(two.params().len());
        b.iter(|| batch_gradient(&two, &xs, &ys, LossKind::Hinge, Some(1.0), &mask))
    });
    g.finish();
}

fn noisy_update(c: &mut Criterion) {
    let mut rng = seeded(3);
    let net = MlpNet::pytorch_init(&MlpNet::small_dims(50), &mut rng).unwrap();
    let grad = vec![1e-3; net.params().len()];
    let cfg = NoisySgdConfig { noise_level: 1e-3, projection: Some(1.0), ..NoisySgdConfig::plain(0.01, 64) };
    let mask = ParamMask::all(net.params().len());
    c.bench_function("noisy_update_mlp_small", |b| {
        b.iter_batched(
            || net.params().to_vec(),
            |mut p| apply_mean_gradient(&mut p, &grad, &cfg, 0, &mut rng, &mask),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, gradients, noisy_update);
criterion_main!(benches);
