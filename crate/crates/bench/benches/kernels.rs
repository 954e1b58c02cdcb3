use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cxr_bench::phantom;
use cxr_core::imageproc::{augment, clahe, AugmentSpec, ClaheParams};
use cxr_core::nets::build_classifier;
use cxr_core::{ClassifierConfig, Graph, Tensor};

fn ramp(shape: &[usize], k: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| (i as f64 * k).sin()).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[8, 16, 32, 32], 0.37);
    let w = ramp(&[32, 16, 3, 3], 0.11);
    c.bench_function("conv2d 8x16x32x32 -> 32 fwd", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::no_grad();
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            black_box(g.conv2d(xv, wv, None, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d 8x16x32x32 -> 32 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(wv).is_some());
        })
    });
}

fn image(c: &mut Criterion) {
    let img = phantom(256);
    let params = ClaheParams::default();
    c.bench_function("clahe 256x256", |b| b.iter(|| black_box(clahe(&img, &params).unwrap())));
    let spec = AugmentSpec::sample(11);
    c.bench_function("augment 256x256", |b| b.iter(|| black_box(augment(&img, &spec, 0).unwrap())));
}

fn forward(c: &mut Criterion) {
    let model = build_classifier(&ClassifierConfig::default(), 3).unwrap();
    let x = ramp(&[4, 1, 64, 64], 0.05).map(|v| v.abs());
    c.bench_function("classifier predict 4x1x64x64", |b| b.iter(|| black_box(model.predict(&x).unwrap())));
}

criterion_group!(benches, conv, image, forward);
criterion_main!(benches);
