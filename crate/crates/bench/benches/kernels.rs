use criterion::{black_box, criterion_group, criterion_main, Criterion};

use hetmoe::analog::analog_mvm;
use hetmoe::numerics::RngStream;
use hetmoe::synthetic::Task;
use hetmoe::trainer::{hinge_loss_and_grads, TheoryModel};
use hetmoe::{AnalogLayer, NoiseSpec, QuantizerConfig, TaskSpec, TrainConfig};
use hetmoe_bench::random_matrix;

fn matmul(c: &mut Criterion) {
    let a = random_matrix(64, 64, 0);
    let b = random_matrix(64, 64, 1);
    c.bench_function("matmul_64", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
}

fn analog(c: &mut Criterion) {
    let w = random_matrix(1024, 512, 2);
    let mut layer = AnalogLayer::new(w, 512, QuantizerConfig::default()).unwrap();
    layer.program(&NoiseSpec::pcm(), &RngStream::new(1, 0)).unwrap();
    layer.calibrate(&random_matrix(16, 1024, 3)).unwrap();
    let x = random_matrix(1, 1024, 4).into_vec();
    c.bench_function("analog_mvm_1024x512", |bench| bench.iter(|| analog_mvm(&layer, black_box(&x)).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let spec = TaskSpec::default();
    let cfg = TrainConfig::default();
    let task = Task::new(spec, &mut RngStream::new(0, 0)).unwrap();
    let model = TheoryModel::init(&task, &cfg, &mut RngStream::new(0, 1)).unwrap();
    let batch = task.sample_many(cfg.batch_size, &mut RngStream::new(0, 2));
    c.bench_function("hinge_grads_batch", |bench| {
        bench.iter(|| hinge_loss_and_grads(black_box(&model), &task, black_box(&batch)).unwrap())
    });
}

criterion_group!(benches, matmul, analog, train_step);
criterion_main!(benches);
