//! Parallel vs sequential kernel comparison.
//!
//! The public entry points dispatch to rayon when the `parallel` feature is
//! on (the default); `kernels::seq` is the always-compiled sequential
//! reference, so one run shows both sides:
//!
//!   cargo bench -p sinet-core

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sinet_core::kernels::{self, seq, ConvShape};
use sinet_core::rng::Rng;

fn conv_case(
    n: usize,
    c: usize,
    hw: usize,
    m: usize,
    k: usize,
    g: usize,
) -> (Vec<f64>, Vec<f64>, ConvShape) {
    let mut rng = Rng::new(42);
    let sh = ConvShape {
        n,
        c_in: c,
        h: hw,
        w: hw,
        c_out: m,
        k,
        stride: 1,
        pad: (k - 1) / 2,
        groups: g,
    };
    let x = (0..n * c * hw * hw)
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    let w = (0..m * (c / g) * k * k)
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    (x, w, sh)
}

fn bench_conv_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward");
    for (name, case) in [
        ("batch8_c24_16x16_g2", conv_case(8, 24, 16, 24, 3, 2)),
        ("batch8_c48_8x8_g2", conv_case(8, 48, 8, 48, 5, 2)),
    ] {
        let (x, w, sh) = case;
        group.bench_with_input(BenchmarkId::new("parallel", name), &(), |b, _| {
            b.iter(|| kernels::conv2d_forward(black_box(&x), black_box(&w), None, &sh))
        });
        group.bench_with_input(BenchmarkId::new("sequential", name), &(), |b, _| {
            b.iter(|| seq::conv2d_forward(black_box(&x), black_box(&w), None, &sh))
        });
    }
    group.finish();
}

fn bench_conv_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_backward");
    let (x, w, sh) = conv_case(8, 24, 16, 24, 3, 2);
    let mut rng = Rng::new(7);
    let dy: Vec<f64> = (0..8 * 24 * 16 * 16)
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    group.bench_function("parallel", |b| {
        b.iter(|| {
            kernels::conv2d_backward(
                black_box(&x),
                black_box(&w),
                black_box(&dy),
                &sh,
                true,
                false,
            )
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            seq::conv2d_backward(
                black_box(&x),
                black_box(&w),
                black_box(&dy),
                &sh,
                true,
                false,
            )
        })
    });
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = Rng::new(3);
    let (m, k, n) = (128, 256, 128);
    let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b_mat: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    group.bench_function("parallel", |bch| {
        bch.iter(|| kernels::matmul(black_box(&a), black_box(&b_mat), m, k, n))
    });
    group.bench_function("sequential", |bch| {
        bch.iter(|| seq::matmul(black_box(&a), black_box(&b_mat), m, k, n))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_conv_forward,
    bench_conv_backward,
    bench_matmul
);
criterion_main!(benches);
