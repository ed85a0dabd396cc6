//! Parallel-vs-sequential benchmarks of the data-parallel kernels.
//!
//! `force_sequential` flips the process-wide dispatch at runtime, so both
//! paths run inside one binary. With `--no-default-features` the two groups
//! coincide (everything is sequential).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use xmfnet::autodiff::{kernels, Tape};
use xmfnet::geometry::{knn, PointCloud};
use xmfnet::losses::chamfer_l1_val;
use xmfnet::parallel::force_sequential;
use xmfnet::render::{render_silhouette, Camera, RenderConfig};

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect(),
    )
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_knn(c: &mut Criterion) {
    let pc = random_cloud(2048, 1);
    let mut group = c.benchmark_group("knn_2048_k20");
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            force_sequential(seq);
            b.iter(|| black_box(knn(&pc, 20).unwrap()));
            force_sequential(false);
        });
    }
    group.finish();
}

fn bench_chamfer(c: &mut Criterion) {
    let a = random_cloud(2048, 2);
    let bcloud = random_cloud(2048, 3);
    let mut group = c.benchmark_group("chamfer_l1_2048");
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            force_sequential(seq);
            b.iter(|| black_box(chamfer_l1_val(&a, &bcloud).unwrap()));
            force_sequential(false);
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<f64> = (0..256 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..256 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut group = c.benchmark_group("matmul_256");
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            force_sequential(seq);
            bch.iter(|| {
                let mut out = vec![0.0; 256 * 256];
                kernels::matmul_acc(&a, 256, 256, false, &b, 256, 256, false, &mut out);
                black_box(out)
            });
            force_sequential(false);
        });
    }
    group.finish();
}

fn bench_rasterize(c: &mut Criterion) {
    let pc = random_cloud(2048, 5);
    let cam = Camera::look_at(
        [0.0, 1.0, -2.5],
        [0.0; 3],
        [0.0, 1.0, 0.0],
        179.2,
        179.2,
        224,
        224,
    );
    let cfg = RenderConfig::default();
    let mut group = c.benchmark_group("rasterize_2048_224");
    group.sample_size(20);
    for (name, seq) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            force_sequential(seq);
            b.iter(|| {
                let tape = Tape::new();
                let pts = tape.constant(vec![pc.len(), 3], pc.to_flat()).unwrap();
                black_box(render_silhouette(&pts, &cam, &cfg).unwrap().0.values())
            });
            force_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, bench_knn, bench_chamfer, bench_matmul, bench_rasterize);
criterion_main!(benches);
