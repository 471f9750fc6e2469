//! Hot paths of the training loop: forward, backward, attack steps, injection.

use booster_bench::fixture;
use booster_core::attack::{self, Objective};
use booster_core::{rng, BoosterSignal};
use criterion::{criterion_group, criterion_main, Criterion};

fn forward(c: &mut Criterion) {
    let (model, x, _) = fixture(16);
    c.bench_function("forward_b16", |b| b.iter(|| model.logits(&x).unwrap()));
}

fn backward(c: &mut Criterion) {
    let (model, x, y) = fixture(16);
    c.bench_function("input_gradient_b16", |b| {
        b.iter(|| model.input_gradient(&x, &y).unwrap())
    });
}

fn attacks(c: &mut Criterion) {
    let (model, x, y) = fixture(16);
    let eps = 8.0 / 255.0;
    c.bench_function("fgsm_b16", |b| {
        b.iter(|| attack::fgsm(&model, &x, &y, eps, None).unwrap())
    });

    let spec = attack::profile("pgd7", eps).unwrap();
    let mut g = c.benchmark_group("pgd");
    g.sample_size(10);
    g.bench_function("pgd7_b16", |b| {
        b.iter(|| {
            let mut r = rng::stream(5, &[0]);
            attack::pgd(&model, &x, &y, &spec, &Objective::CrossEntropy, None, &mut r).unwrap()
        })
    });
    g.finish();
}

fn injection(c: &mut Criterion) {
    let (_, x, _) = fixture(128);
    let sig = BoosterSignal::null(4, 1, (booster_bench::SIDE, booster_bench::SIDE));
    c.bench_function("inject_b128", |b| b.iter(|| sig.inject_batch(&x).unwrap()));
}

criterion_group!(kernels, forward, backward, attacks, injection);
criterion_main!(kernels);
