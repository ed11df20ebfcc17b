use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctdn::cam::sinkhorn_trace;
use ctdn::crf::{dense_crf_with, CrfParams};
use ctdn::data::{generate_scene, generate_scenes_with, SceneSpec};
use ctdn::par::Parallelism;
use ctdn::tensor::Mat64;

fn crf(c: &mut Criterion) {
    let spec = SceneSpec {
        height: 48,
        width: 48,
        ..Default::default()
    };
    let img = generate_scene(&spec, 0).unwrap().image;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = 7;
    let mut unary = Vec::with_capacity(48 * 48 * k);
    for _ in 0..48 * 48 {
        let cell: Vec<f32> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f32 = cell.iter().sum();
        unary.extend(cell.iter().map(|v| v / s));
    }
    let params = CrfParams::default();
    let mut group = c.benchmark_group("dense_crf_48x48");
    group.sample_size(10);
    for mode in Parallelism::available() {
        group.bench_with_input(BenchmarkId::from_parameter(mode.name()), &mode, |b, &m| {
            b.iter(|| dense_crf_with(&unary, k, &img, &params, m).unwrap())
        });
    }
    group.finish();
}

fn sinkhorn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 144;
    let m = Mat64::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(0.01..1.0)).collect()).unwrap();
    let mut group = c.benchmark_group("sinkhorn_144");
    for mode in Parallelism::available() {
        group.bench_with_input(BenchmarkId::from_parameter(mode.name()), &mode, |b, &md| {
            b.iter(|| sinkhorn_trace(&m, 10, 0.0, md).unwrap())
        });
    }
    group.finish();
}

fn scenes(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let idx: Vec<u64> = (0..32).collect();
    let mut group = c.benchmark_group("generate_32_scenes");
    group.sample_size(10);
    for mode in Parallelism::available() {
        group.bench_with_input(BenchmarkId::from_parameter(mode.name()), &mode, |b, &m| {
            b.iter(|| generate_scenes_with(&spec, &idx, m).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, crf, sinkhorn, scenes);
criterion_main!(benches);
