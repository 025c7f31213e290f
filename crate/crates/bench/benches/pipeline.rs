use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::dvector;

use ensemble_bridge::controllers::{BridgePlan, NoiseHistory};
use ensemble_bridge::marginals::{build_end_kernel, sinkhorn};
use ensemble_bridge::pipeline::{cosine_mirror_marginals, DEFAULT_PADDING};
use ensemble_bridge::simulator::{run_distribution_bridge_with, run_pinned_bridge_with};
use ensemble_bridge::{EnsembleSystem, PropagatorCache, TimeGrid};

fn cache_build(c: &mut Criterion) {
    let ens = EnsembleSystem::planar_rotation(64, 0.1, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 1000).unwrap();
    c.bench_function("cache/rotation-64x1000", |b| b.iter(|| PropagatorCache::build(black_box(&ens), grid).unwrap()));
}

fn potentials(c: &mut Criterion) {
    let ens = EnsembleSystem::scalar_decay(64, 0.1, 1.0).unwrap();
    let cache = PropagatorCache::build(&ens, TimeGrid::new(1.0, 200).unwrap()).unwrap();
    let (rho0, rhof) = cosine_mirror_marginals(&ens, &cache, 256, 256, DEFAULT_PADDING).unwrap();
    let kernel = build_end_kernel(&ens, &cache, &rho0, &rhof).unwrap();
    c.bench_function("kernel/cosine-256", |b| b.iter(|| build_end_kernel(&ens, &cache, &rho0, &rhof).unwrap()));
    c.bench_function("sinkhorn/cosine-256", |b| b.iter(|| sinkhorn(&rho0, &rhof, black_box(&kernel), 1e-9, 100_000).unwrap()));
}

fn trajectories(c: &mut Criterion) {
    let ens = EnsembleSystem::scalar_decay(64, 0.1, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 200).unwrap();
    let cache = PropagatorCache::build(&ens, grid).unwrap();
    let (rho0, rhof) = cosine_mirror_marginals(&ens, &cache, 256, 256, DEFAULT_PADDING).unwrap();
    let kernel = build_end_kernel(&ens, &cache, &rho0, &rhof).unwrap();
    let pot = sinkhorn(&rho0, &rhof, &kernel, 1e-9, 100_000).unwrap();
    let plan = BridgePlan::new(&ens, &cache, &pot, &rhof).unwrap();
    let hist = NoiseHistory::sample(1, grid, 1);
    let x0 = dvector![0.3];
    c.bench_function("simulate/bridge-200", |b| {
        b.iter(|| run_distribution_bridge_with(&ens, &plan, black_box(&x0), &hist).unwrap())
    });
    c.bench_function("simulate/pinned-200", |b| {
        b.iter(|| run_pinned_bridge_with(&ens, &cache, black_box(&x0), &dvector![0.7], &hist).unwrap())
    });
}

criterion_group!(benches, cache_build, potentials, trajectories);
criterion_main!(benches);
