use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use foe_bench::ConvFixture;
use foe_core::fourier::fourier_conv2d;
use foe_core::kernels::conv_forward;
use foe_core::Tape;

fn global_kernel(c: &mut Criterion) {
    let mut g = c.benchmark_group("global_kernel_conv");
    g.sample_size(10);
    for n in [32usize, 64, 128] {
        let f = ConvFixture::new(n);
        g.bench_with_input(BenchmarkId::new("fourier", n), &f, |b, f| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (x, w) = (tape.constant(f.x.clone()), tape.constant(f.weight.clone()));
                black_box(fourier_conv2d(&mut tape, x, w, None).unwrap());
            })
        });
        g.bench_with_input(BenchmarkId::new("direct", n), &f, |b, f| {
            b.iter(|| black_box(conv_forward(&f.x4, &f.kernel, None).unwrap()))
        });
    }
    g.finish();
}

fn fourier_backward(c: &mut Criterion) {
    let f = ConvFixture::new(128);
    c.bench_function("fourier_conv_forward_backward_128", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(f.x.clone());
            let w = tape.param(f.weight.clone());
            let y = fourier_conv2d(&mut tape, x, w, None).unwrap();
            let s = tape.sum(y).unwrap();
            black_box(tape.backward(s).unwrap());
        })
    });
}

criterion_group!(benches, global_kernel, fourier_backward);
criterion_main!(benches);
