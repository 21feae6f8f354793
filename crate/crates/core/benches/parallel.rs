//! Sequential vs rayon execution of one pretraining epoch and of fine-tuning.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossvideo::datagen::{generate_dataset, DatasetSpec};
use crossvideo::parallel::Execution;
use crossvideo::train::{finetune_with, pretrain_with, FinetuneMode, PretrainOptions, Task, TrainConfig, TrainState};

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.batch_size = 8;
    cfg.total_epochs = 1;
    cfg.warmup_epochs = 0;
    cfg.d_proj = 64;
    cfg.encoder.feature_dim = 32;
    cfg.encoder.projection_hidden = 64;
    cfg.finetune.epochs = 1;
    cfg
}

fn bench(c: &mut Criterion) {
    let data = generate_dataset(&DatasetSpec {
        pretrain: 8,
        train: 8,
        test: 0,
        points: 64,
        ..DatasetSpec::default()
    })
    .unwrap();
    let cfg = config();
    let mut group = c.benchmark_group("pretrain_epoch");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                let opts = PretrainOptions {
                    execution: exec,
                    ..PretrainOptions::default()
                };
                pretrain_with(&data.pretrain, TrainState::new(&cfg).unwrap(), &opts).unwrap()
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("finetune_epoch");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| finetune_with(&data.train, None, &cfg, FinetuneMode::Scratch, Task::Action, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
