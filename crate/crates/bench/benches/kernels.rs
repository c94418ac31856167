use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use snn_kws::layers::Mode;
use snn_kws::tensor::kernels::{conv1d_forward, Conv1dGeometry};
use snn_kws::training::{train_epoch, Optimizer, TrainConfig};
use snn_kws::{build_model, ModelConfig, Tape};
use snn_kws_bench::random_tensor;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv1d");
    for dilation in [1, 4] {
        let geom = Conv1dGeometry {
            in_channels: 16,
            out_channels: 32,
            kernel: 5,
            stride: 2,
            dilation,
            padding: Conv1dGeometry::same_padding(5, dilation),
        };
        let x = random_tensor(&[8, 16, 2000], 1);
        let w = random_tensor(&[32, 16, 5], 2);
        group.bench_with_input(BenchmarkId::new("forward", dilation), &dilation, |b, _| {
            b.iter(|| conv1d_forward(black_box(&x), &w, None, &geom).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", dilation), &dilation, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone(), true);
                let wv = tape.leaf(w.clone(), true);
                let y = tape.conv1d(xv, wv, None, geom).unwrap();
                let loss = tape.sum(y).unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.grad(wv).map(|g| g[0]))
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::synthetic();
    let m = build_model(&cfg).unwrap();
    let wave = random_tensor(&[4, cfg.input_len], 3);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("forward_eval_synthetic_b4", |b| b.iter(|| m.infer(black_box(&wave), Mode::Eval).unwrap()));

    let full = build_model(&ModelConfig::default()).unwrap();
    let one = random_tensor(&[1, full.config.input_len], 4);
    group.bench_function("forward_eval_default_b1", |b| b.iter(|| full.infer(black_box(&one), Mode::Eval).unwrap()));

    let data: Vec<(Vec<f32>, usize)> = (0..16)
        .map(|i| (random_tensor(&[cfg.input_len], 10 + i).into_data(), i as usize % 2))
        .collect();
    let tc = TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    };
    group.bench_function("train_step_synthetic_b16", |b| {
        let mut model = m.clone();
        let mut opt = Optimizer::new(&tc);
        b.iter(|| train_epoch(&mut model, &mut opt, &data[..], &tc, 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, model);
criterion_main!(benches);
