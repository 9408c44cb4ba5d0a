//! Thread-pool scaling of the hot paths. Build with `--no-default-features`
//! to measure the purely sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use disentangle::camera::{self, CameraPose};
use disentangle::model::nets::Template;
use disentangle::par;
use disentangle::pipeline::train::Example;
use disentangle::pipeline::{TrainConfig, Trainer};
use disentangle::renderer::{rasterize, RasterConfig};
use disentangle::synth::{self, Dataset, SynthSpec};

fn thread_counts() -> Vec<usize> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    if par::parallel_enabled() && all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn render(c: &mut Criterion) {
    let template = Template::new(3).unwrap();
    let verts = template.mesh.vertex_tensor().scale(disentangle::mesh::TEMPLATE_SCALE);
    let pose = CameraPose::from_view(30f64.to_radians(), 20f64.to_radians(), 1.0, [0.0, 0.0]).unwrap();
    let proj = camera::project(&pose, &verts).unwrap();
    let colors = disentangle::Tensor::new(&[template.faces.len(), 3], vec![0.5; template.faces.len() * 3]).unwrap();
    let cfg = RasterConfig::with_size(64, 64);
    let mut group = c.benchmark_group("rasterize_64");
    for t in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    let out = rasterize(&proj, &template.faces, Some(&colors), &cfg).unwrap();
                    out.backward(Some(&out.silhouette), out.color.as_ref()).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_classes: 2,
        train_per_class: 2,
        test_per_class: 0,
        image_size: 32,
        ..SynthSpec::default()
    };
    synth::dataset::generate(&spec, dir.path()).unwrap();
    let examples: Vec<Example> = Dataset::open(dir.path())
        .unwrap()
        .load("train")
        .unwrap()
        .iter()
        .map(|r| Example::from_record(r).unwrap())
        .collect();
    let mut config = TrainConfig::default();
    config.model.image_size = 32;
    config.model.num_classes = 2;
    config.render = RasterConfig::with_size(32, 32);
    config.max_steps = Some(usize::MAX);
    let mut group = c.benchmark_group("phase_a_step_32");
    group.sample_size(10);
    for t in thread_counts() {
        let mut trainer = Trainer::new(config.clone(), examples.clone()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || trainer.step_phase_a().unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, render, train_step);
criterion_main!(benches);
