use std::hint::black_box;
use std::sync::Arc;

use blanket::compile::{train, ArtifactStore, TrainingConfig};
use blanket::diagnostics::{ess, r_hat};
use blanket::infer::{mh_step, Proposer, RwmhConfig, SamplerState};
use blanket::models::{build, ModelParams, ZooModel};
use blanket::nn::compute_phi;
use blanket::{ancestral_sample, seed, World};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

fn schools() -> ZooModel {
    let params = ModelParams { n_schools: Some(50), data_seed: Some(1), ..ModelParams::default() };
    build("nschools", &params).unwrap()
}

fn store(z: &ZooModel) -> ArtifactStore {
    let cfg = TrainingConfig { num_worlds: 100, epochs: 1, seed: 2, ..TrainingConfig::default() };
    train(&*z.model, &cfg).unwrap()
}

fn world(z: &ZooModel) -> World {
    ancestral_sample(&*z.model, &mut seed::rng_from(3), Some(&z.observations)).unwrap()
}

fn bench_compute_phi(c: &mut Criterion) {
    let z = schools();
    let store = store(&z);
    let w = world(&z);
    let addrs = w.latent_addresses();
    c.bench_function("compute_phi/nschools-50 every latent", |b| {
        b.iter(|| {
            for a in &addrs {
                black_box(compute_phi(&store, &w, a).unwrap());
            }
        })
    });
}

fn bench_sweeps(c: &mut Criterion) {
    let z = schools();
    let lic = Proposer::Lic(Arc::new(store(&z)));
    let start = world(&z);
    let mut group = c.benchmark_group("mh sweep/nschools-50");
    for (name, proposer) in [
        ("prior", Proposer::Prior),
        ("rwmh", Proposer::AdaptiveRwmh(RwmhConfig::default())),
        ("lic", lic),
    ] {
        group.bench_function(name, |b| {
            b.iter_batched(
                || start.clone(),
                |mut w| {
                    let mut state = SamplerState::default();
                    let mut rng = seed::rng_from(4);
                    for a in w.latent_addresses() {
                        black_box(mh_step(&mut w, &*z.model, &a, &proposer, &mut state, &mut rng).unwrap());
                    }
                    w
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn bench_training_epoch(c: &mut Criterion) {
    let z = schools();
    let cfg = TrainingConfig { num_worlds: 100, epochs: 1, seed: 5, ..TrainingConfig::default() };
    c.bench_function("train/nschools-50 100 worlds 1 epoch", |b| {
        b.iter(|| black_box(train(&*z.model, &cfg).unwrap()))
    });
}

fn bench_diagnostics(c: &mut Criterion) {
    let mut rng = seed::rng_from(6);
    let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    c.bench_function("ess/4x1000", |b| b.iter(|| black_box(ess(&chains).unwrap())));
    c.bench_function("r_hat/4x1000", |b| b.iter(|| black_box(r_hat(&chains).unwrap())));
}

criterion_group!(benches, bench_compute_phi, bench_sweeps, bench_training_epoch, bench_diagnostics);
criterion_main!(benches);
