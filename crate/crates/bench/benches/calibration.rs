use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qkit_bench::heavy_tailed;
use qkit_core::calib::{calibrate, CalibrationMethod, Histogram};

fn histogram(c: &mut Criterion) {
    let x = heavy_tailed(1 << 16, 1);
    c.bench_function("histogram_observe_64k", |b| {
        b.iter(|| Histogram::new(2048).observed(black_box(&x)).unwrap())
    });
}

fn calibrators(c: &mut Criterion) {
    let mut g = c.benchmark_group("calibrate");
    let x = heavy_tailed(1 << 16, 2);
    for bins in [512, 2048] {
        let h = Histogram::new(bins).observed(&x).unwrap();
        for method in [CalibrationMethod::Max, CalibrationMethod::Percentile(0.9999), CalibrationMethod::Entropy] {
            g.bench_with_input(BenchmarkId::new(method.to_string(), bins), &h, |b, h| {
                b.iter(|| calibrate(black_box(h), method, 8).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, histogram, calibrators);
criterion_main!(benches);
