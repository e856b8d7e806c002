use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use foe_bench::{rng, toy_scope};
use foe_core::optics::{apply_shot_noise, image_volume};
use foe_core::{Tape, Tensor};

fn psf(c: &mut Criterion) {
    let (scope, phi) = toy_scope();
    c.bench_function("psf_stack_toy", |b| b.iter(|| black_box(scope.psf_stack(&phi).unwrap())));
    c.bench_function("psf_stack_toy_with_gradient", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = tape.param(phi.tensor().clone());
            let planes: Vec<usize> = (0..scope.planes()).collect();
            let s = scope.psf_planes(&mut tape, p, &planes).unwrap();
            let l = tape.sum(s).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn imaging(c: &mut Criterion) {
    let (scope, phi) = toy_scope();
    let s = scope.psf_stack(&phi).unwrap();
    let [h, w] = scope.config().camera_pixels;
    let v = Tensor::uniform(&[scope.planes(), h, w], 0.0, 1.0, &mut rng());
    c.bench_function("image_and_noise_toy", |b| {
        b.iter(|| {
            let mu = image_volume(&s, &v).unwrap();
            black_box(apply_shot_noise(&mu, 0).unwrap())
        })
    });
}

criterion_group!(benches, psf, imaging);
criterion_main!(benches);
