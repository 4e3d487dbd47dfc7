use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use uqdepth::{DepthModel, FusionMode, ModelConfig, Phase};

const SIZE: usize = 64;

fn forward(c: &mut Criterion) {
    let device = Device::Cpu;
    let x = Tensor::rand(0f32, 1f32, (1, 3, SIZE, SIZE), &device).unwrap();
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for mode in [FusionMode::LocalOnly, FusionMode::GlobalOnly, FusionMode::UncertaintyFusion] {
        let model = DepthModel::new(&ModelConfig::desk(SIZE, 1.0, mode), 0, &device).unwrap();
        group.bench_with_input(BenchmarkId::new("eval", mode), &mode, |b, _| {
            b.iter(|| model.forward(&x, Phase::Eval).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
