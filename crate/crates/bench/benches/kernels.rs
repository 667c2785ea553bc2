use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qkit_bench::uniform;
use qkit_core::graph::{forward_fp32, Int8Executor};
use qkit_core::kernels::{
    affine_offline_term, conv2d, conv2d_int8, conv_weight_matrix, integer_matmul_affine, integer_matmul_scale,
    ConvGeometry, QLinearWeights,
};
use qkit_core::quant::{affine_params, quantize, scale_params, RangeSpec};
use qkit_core::tensor::matmul;
use qkit_core::toy::mlp;

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for n in [32, 128, 256] {
        let x = uniform(vec![n, n], 1);
        let w = uniform(vec![n, n], 2);
        let xq = quantize(&x, &scale_params(1.0, 8).unwrap()).unwrap();
        let wq = QLinearWeights::quantize_scale(&w, true, 8).unwrap();
        let xa = quantize(&x, &affine_params(RangeSpec::new(-1.0, 1.0).unwrap(), 8).unwrap()).unwrap();
        let wa = QLinearWeights::quantize_affine(&w, 8).unwrap();
        let off = affine_offline_term(&wa, xa.params().zero_point());
        g.bench_with_input(BenchmarkId::new("fp64", n), &n, |b, _| {
            b.iter(|| matmul(black_box(&x), black_box(&w)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("int8_scale", n), &n, |b, _| {
            b.iter(|| integer_matmul_scale(black_box(&xq), black_box(&wq)).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("int8_affine", n), &n, |b, _| {
            b.iter(|| integer_matmul_affine(black_box(&xa), black_box(&wa), &off).unwrap())
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    let x = uniform(vec![8, 16, 16, 16], 3);
    let w = uniform(vec![32, 16, 3, 3], 4);
    let geo = ConvGeometry { stride: 1, padding: 1 };
    let xq = quantize(&x, &scale_params(1.0, 8).unwrap()).unwrap();
    let wq = QLinearWeights::quantize_scale(&conv_weight_matrix(&w).unwrap(), true, 8).unwrap();
    g.bench_function("fp64_im2col", |b| b.iter(|| conv2d(black_box(&x), &w, None, geo).unwrap()));
    g.bench_function("int8_im2col", |b| {
        b.iter(|| conv2d_int8(black_box(&xq), &wq, 3, 3, None, geo).unwrap())
    });
    g.finish();
}

fn mlp_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("mlp_forward");
    let model = mlp(&[64, 256, 256, 10], 0).unwrap();
    let x = uniform(vec![256, 64], 5);
    let mut q = model.clone();
    for &i in &q.quantizable_layers() {
        q.set_activation_alpha(i, Some(4.0)).unwrap();
    }
    q.set_all_quant(true);
    let exec = Int8Executor::new(&q).unwrap();
    g.bench_function("fp32", |b| b.iter(|| forward_fp32(&model, black_box(&x)).unwrap()));
    g.bench_function("int8", |b| b.iter(|| exec.forward(black_box(&x)).unwrap()));
    g.finish();
}

criterion_group!(benches, gemm, conv, mlp_forward);
criterion_main!(benches);
