//! Forward/backward cost over cascade size.
//!
//! The graph-attention path is quadratic in the observed size n while the
//! time-embedding and LSTM paths are linear, so the n in {50, 100, 200}
//! series should grow markedly faster than linearly.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tcan::seeds::substream;
use tcan::tape::{RunMode, Tape};
use tcan_bench::{cascade_of_size, model_for};

fn bench_forward(c: &mut Criterion) {
    let sizes = [50usize, 100, 200];
    let views: Vec<_> = sizes.iter().map(|&n| cascade_of_size(n, 11)).collect();
    let model = model_for(&views, 5);

    let mut group = c.benchmark_group("forward");
    for (i, &n) in sizes.iter().enumerate() {
        group.bench_with_input(BenchmarkId::from_parameter(n), &views[i], |b, v| {
            b.iter(|| black_box(model.predict(v).expect("forward")));
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let sizes = [50usize, 100, 200];
    let views: Vec<_> = sizes.iter().map(|&n| cascade_of_size(n, 11)).collect();
    let mut group = c.benchmark_group("forward_backward");
    for (i, &n) in sizes.iter().enumerate() {
        let mut model = model_for(&views, 5);
        let v = views[i].clone();
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let mut rng = substream(0, "bench");
                let out = model
                    .forward_tape(&mut tape, &v, RunMode::eval(), &mut rng, false)
                    .expect("forward");
                let loss = model.squared_log_error(&mut tape, out.output, v.label).expect("loss");
                tape.backward(loss, &mut model.store).expect("backward");
                model.store.zero_grads();
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward, bench_train_step);
criterion_main!(benches);
