//! Sequential versus data-parallel evaluation of the batched loss and of
//! distillation labelling. On a single core the two should be close.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use tlode::experiments::linear_one_step_dataset;
use tlode::midpoint::LearnedMidpoint;
use tlode::parallel::Parallelism;
use tlode::rng::Rng;
use tlode::training::{distill_dataset, evaluate_loss, LossSpec, Trainable};
use tlode::{Activation, GammaShape, LinearStiffSystem, MidpointModel, Mlp, VectorField};

fn modes() -> [(&'static str, Parallelism); 2] {
    [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Auto)]
}

fn loss(c: &mut Criterion) {
    let sys = LinearStiffSystem::stiff();
    let mut rng = Rng::new(0);
    let data = linear_one_step_dataset(&sys.a, 0.01, 2048, 0.5, &mut rng).unwrap();
    let net = Mlp::random(&[2, 32, 2], &[Activation::Tanh, Activation::Identity], true, &mut rng).unwrap();
    let field = VectorField::mlp(net).unwrap();
    let mp =
        MidpointModel::Learned(LearnedMidpoint::random(2, 16, Activation::Tanh, GammaShape::Full, &mut rng).unwrap());
    let spec = LossSpec::tl(&field, &mp, 2).with_lambda(1.0);
    let mut group = c.benchmark_group("tl_loss_2048");
    for (name, mode) in modes() {
        group.bench_function(name, |b| {
            b.iter(|| evaluate_loss(black_box(&spec), data.records(), Trainable::Field, mode, 256).unwrap())
        });
    }
    group.finish();
}

fn distill(c: &mut Criterion) {
    let sys = LinearStiffSystem::new(-1.0, -20.0, Some(0.3)).unwrap();
    let mut rng = Rng::new(1);
    let data = linear_one_step_dataset(&sys.a, 0.1, 256, 0.5, &mut rng).unwrap();
    let field = sys.field();
    let mut group = c.benchmark_group("distill_64");
    group.sample_size(20);
    for (name, mode) in modes() {
        group.bench_function(name, |b| {
            b.iter(|| distill_dataset(&field, &data, 64, &mut Rng::new(2), mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, loss, distill);
criterion_main!(benches);
