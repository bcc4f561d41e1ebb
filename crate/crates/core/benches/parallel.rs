//! Data-parallel core vs sequential fallback on the two hot workloads:
//! batched training gradients and batched sampling trials.
//!
//! With the default `parallel` feature the comparison pins rayon pools of
//! one worker versus all cores; built with `--no-default-features` only the
//! sequential path exists and the two series coincide.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use prospect_core::model::ModelConfig;
use prospect_core::rng::RngStream;
use prospect_core::sampler::{ddim_sample, SamplerConfig};
use prospect_core::schedule::make_schedule;
use prospect_core::spectrum::{StageConditions, StageSchedule};
use prospect_core::synth::{sample_dataset, AttributeLabel};
use prospect_core::train::{train, TrainConfig};

fn train_steps(steps: usize) {
    let mut rng = RngStream::new(11, 0);
    let data = sample_dataset(96, &mut rng, true).expect("dataset");
    let sched = make_schedule(1000, 1e-4, 0.02).expect("schedule");
    let cfg = TrainConfig { steps, batch_size: 8, ..Default::default() };
    let r = train(&data, &cfg, ModelConfig::default(), &sched, &RngStream::new(1, 0), |_, _, _| {});
    criterion::black_box(r.expect("train").losses);
}

fn sample_trials(trials: usize) {
    let mut rng = RngStream::new(12, 0);
    let data = sample_dataset(48, &mut rng, true).expect("dataset");
    let sched = make_schedule(1000, 1e-4, 0.02).expect("schedule");
    let cfg = TrainConfig { steps: 1, batch_size: 2, ..Default::default() };
    let model = train(&data, &cfg, ModelConfig::default(), &sched, &RngStream::new(2, 0), |_, _, _| {})
        .expect("train")
        .model;
    let ss = StageSchedule::new(1000, 10).expect("stages");
    let sampler = SamplerConfig { steps: 10, ..Default::default() };
    let base = RngStream::new(3, 0);
    let imgs = prospect_core::parallel::map_indexed(trials, |i| {
        let mut trial = base.derive(i as u64);
        let cond = StageConditions::constant(
            ss,
            model.label_embedding(AttributeLabel::from_index(i % 48)),
        );
        ddim_sample(&model, &sched, &cond, &sampler, &mut trial).expect("sample").0
    });
    criterion::black_box(imgs);
}

#[cfg(feature = "parallel")]
fn with_pool(workers: usize, f: impl FnOnce() + Send) {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("pool")
        .install(f);
}

#[cfg(not(feature = "parallel"))]
fn with_pool(_workers: usize, f: impl FnOnce() + Send) {
    f();
}

fn bench_parallel_vs_sequential(c: &mut Criterion) {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);

    let mut group = c.benchmark_group("train_batch_gradients");
    group.sample_size(10);
    for workers in [1, cores] {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            b.iter(|| with_pool(w, || train_steps(3)));
        });
    }
    group.finish();

    let mut group = c.benchmark_group("sampling_trials");
    group.sample_size(10);
    for workers in [1, cores] {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            b.iter(|| with_pool(w, || sample_trials(8)));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_parallel_vs_sequential);
criterion_main!(benches);
