use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use sparsedrop::{dense_gemm, dsd_matmul, par, sdd_matmul, BlockMask, DropoutSpec, Matrix, TileConfig};

const SIZE: usize = 256;

fn thread_counts() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("sequential", 1), ("parallel", all)]
}

fn gemms(c: &mut Criterion) {
    let tiles = TileConfig::new(64, 64, 32).unwrap();
    let a = Matrix::<f32>::random(SIZE, SIZE, 1);
    let b = Matrix::<f32>::random(SIZE, SIZE, 2);
    let mut g = c.benchmark_group("gemm");
    g.throughput(Throughput::Elements((2 * SIZE * SIZE * SIZE) as u64));
    for (label, threads) in thread_counts() {
        g.bench_function(BenchmarkId::new("dense", label), |bch| {
            par::with_threads(threads, || bch.iter(|| dense_gemm(black_box(&a), &b, tiles).unwrap()))
        });
        for p in [0.25, 0.5, 0.75] {
            let spec = DropoutSpec::new(p, 64, 32, 3).unwrap();
            let in_mask = BlockMask::sample(&spec, SIZE, SIZE).unwrap();
            g.bench_function(BenchmarkId::new(format!("dsd_p{p}"), label), |bch| {
                par::with_threads(threads, || {
                    bch.iter(|| dsd_matmul(black_box(&a), &in_mask, &b, 2.0, tiles).unwrap())
                })
            });
            let out_spec = DropoutSpec::new(p, 64, 64, 4).unwrap();
            let out_mask = BlockMask::sample(&out_spec, SIZE, SIZE).unwrap();
            g.bench_function(BenchmarkId::new(format!("sdd_p{p}"), label), |bch| {
                par::with_threads(threads, || {
                    bch.iter(|| sdd_matmul(black_box(&a), &b, &out_mask, 2.0, TileConfig::square(64)).unwrap())
                })
            });
        }
    }
    g.finish();
}

fn masks(c: &mut Criterion) {
    let mut g = c.benchmark_group("mask");
    let spec = DropoutSpec::new(0.5, 4, 4, 7).unwrap();
    for (label, threads) in thread_counts() {
        g.bench_function(BenchmarkId::new("sample_4096", label), |bch| {
            par::with_threads(threads, || bch.iter(|| BlockMask::sample(black_box(&spec), 4096, 4096).unwrap()))
        });
    }
    let mask = BlockMask::sample(&spec, 1024, 1024).unwrap();
    g.bench_function("retile_2x2_1024", |bch| bch.iter(|| black_box(&mask).retile(2, 2).unwrap()));
    g.bench_function("transpose_1024", |bch| bch.iter(|| black_box(&mask).transpose()));
    g.finish();
}

criterion_group!(benches, gemms, masks);
criterion_main!(benches);
