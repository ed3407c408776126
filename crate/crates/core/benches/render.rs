use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use shade4d::model::{ModelConfig, SceneModel};
use shade4d::parallel::Parallelism;
use shade4d::radiance::RadianceConfig;
use shade4d::renderer::{render_image, Camera, RenderMode, RenderOptions};
use shade4d::scenegen::{oracle_render, SceneSpec};

fn bench_model() -> SceneModel {
    let cfg = ModelConfig {
        resolution: 32,
        deformation_channels: 8,
        radiance: RadianceConfig {
            sh_order: 2,
            attention_hidden: 16,
            density_channels: 8,
            density_bias: 0.0,
        },
        ..ModelConfig::default()
    };
    SceneModel::new(&cfg, 1).expect("bench model")
}

fn camera() -> Camera {
    Camera::look_at(48, 48, 0.6911, [0.0, 1.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0]).expect("camera")
}

fn render(c: &mut Criterion) {
    let model = bench_model();
    let cam = camera();
    let mut group = c.benchmark_group("render_48x48");
    group.sample_size(10);
    for mode in [Parallelism::Sequential, Parallelism::Threads] {
        let opts = RenderOptions {
            chunk_rays: 256,
            parallelism: mode,
            ..RenderOptions::default()
        };
        let render_mode = RenderMode { deform: true, refine: false };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &opts, |b, opts| {
            b.iter(|| render_image(&model, &cam, 0.5, opts, render_mode).expect("render"))
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let spec = SceneSpec::moving_sphere();
    let cam = Camera::look_at(128, 128, 0.6911, [0.0, 1.0, 4.0], [0.0; 3], [0.0, 1.0, 0.0]).expect("camera");
    let mut group = c.benchmark_group("oracle_128x128");
    for mode in [Parallelism::Sequential, Parallelism::Threads] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| oracle_render(&spec, &cam, 0.5, mode).expect("oracle"))
        });
    }
    group.finish();
}

criterion_group!(benches, render, oracle);
criterion_main!(benches);
