use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use vtdis::diffusion::{forward_paths, reverse_batch, Geometry, Proposal};
use vtdis::exec;
use vtdis::rng::SeedTree;
use vtdis::schedule::geometric_grid;
use vtdis::score::AnalyticGmm;
use vtdis::targets::{Gmm, TargetSpec};

fn reverse(c: &mut Criterion) {
    let gmm = Gmm::two_mode(10).unwrap();
    let target = TargetSpec::Gmm(gmm.clone());
    let model = AnalyticGmm::new(gmm);
    let grid = geometric_grid(50, 1e-3, 50.0).unwrap();
    let prop = Proposal::baseline(grid, Geometry::for_target(&target).unwrap()).unwrap();
    let seeds = SeedTree::new(0);
    let mut group = c.benchmark_group("reverse_batch");
    group.sample_size(10);
    for count in [256usize, 1024] {
        group.bench_with_input(BenchmarkId::new("parallel", count), &count, |b, &n| {
            b.iter(|| black_box(reverse_batch(&seeds, &model, &prop, &target, n).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sequential", count), &count, |b, &n| {
            b.iter(|| exec::sequential(|| black_box(reverse_batch(&seeds, &model, &prop, &target, n).unwrap())))
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let gmm = Gmm::two_mode(10).unwrap();
    let target = TargetSpec::Gmm(gmm.clone());
    let geometry = Geometry::for_target(&target).unwrap();
    let model = AnalyticGmm::new(gmm.clone());
    let grid = geometric_grid(50, 1e-3, 50.0).unwrap();
    let seeds = SeedTree::new(1);
    let x0s = gmm.sample(&mut seeds.named("data").rng(), 512);
    let mut group = c.benchmark_group("forward_paths");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| black_box(forward_paths(&seeds, &model, &grid, &geometry, &target, &x0s).unwrap())));
    group.bench_function("sequential", |b| {
        b.iter(|| exec::sequential(|| black_box(forward_paths(&seeds, &model, &grid, &geometry, &target, &x0s).unwrap())))
    });
    group.finish();
}

criterion_group!(benches, reverse, forward);
criterion_main!(benches);
