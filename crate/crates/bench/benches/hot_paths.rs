use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sdfgen_core::conditioners::ConditionPayload;
use sdfgen_core::diffusion::{DenoiserConfig, DiffusionConfig, LatentDiffusion};
use sdfgen_core::geometry::{marching_cubes, rasterize_tsdf, sample_surface_points, tsdf_to_density, AnalyticSdf};
use sdfgen_core::metrics::{chamfer, uhd};
use sdfgen_core::texturing::{ColorField, Pose, RenderConfig, RenderOperator};
use sdfgen_core::vqvae::{VqVaeConfig, VqVaeModel};

fn geometry(c: &mut Criterion) {
    let sphere = AnalyticSdf::sphere(0.5);
    c.bench_function("rasterize_tsdf D=32", |b| b.iter(|| rasterize_tsdf(black_box(&sphere), 32, 0.2).unwrap()));
    let grid = rasterize_tsdf(&sphere, 32, 0.2).unwrap();
    c.bench_function("marching_cubes D=32", |b| b.iter(|| marching_cubes(black_box(&grid), 0.0)));
}

fn metrics(c: &mut Criterion) {
    let a_grid = rasterize_tsdf(&AnalyticSdf::sphere(0.5), 16, 0.2).unwrap();
    let b_grid = rasterize_tsdf(&AnalyticSdf::cuboid([0.4, 0.3, 0.5]), 16, 0.2).unwrap();
    let a = sample_surface_points(&marching_cubes(&a_grid, 0.0), 2048, 0).unwrap();
    let b = sample_surface_points(&marching_cubes(&b_grid, 0.0), 2048, 1).unwrap();
    c.bench_function("chamfer 2048x2048", |bench| bench.iter(|| chamfer(black_box(&a), black_box(&b))));
    c.bench_function("uhd 2048x2048", |bench| bench.iter(|| uhd(black_box(&a), black_box(&b))));
}

fn models(c: &mut Criterion) {
    let grid = rasterize_tsdf(&AnalyticSdf::sphere(0.5), 16, 0.2).unwrap();
    let vq = VqVaeModel::new(VqVaeConfig::default(), 0).unwrap();
    c.bench_function("vqvae reconstruct D=16", |b| b.iter(|| vq.reconstruct(black_box(&grid)).unwrap()));

    let cfg = DiffusionConfig {
        denoiser: DenoiserConfig {
            base_channels: 16,
            ..DenoiserConfig::default()
        },
        ..DiffusionConfig::default()
    };
    let ldm = LatentDiffusion::new(cfg, 0).unwrap();
    let conds = ldm.encode_conditions(&[(ConditionPayload::Class(0), 2.0)]).unwrap();
    let mut group = c.benchmark_group("diffusion");
    group.sample_size(10);
    group.bench_function("guided sample, 10 steps", |b| b.iter(|| ldm.sample_latent(&conds, 0, Some(10)).unwrap()));
    group.finish();
}

fn rendering(c: &mut Criterion) {
    let grid = rasterize_tsdf(&AnalyticSdf::sphere(0.5), 16, 0.2).unwrap();
    let cfg = RenderConfig::default();
    let density = tsdf_to_density(&grid, cfg.alpha, cfg.beta).unwrap();
    let pose = Pose {
        azimuth: 30.0,
        elevation: 20.0,
    };
    let mut group = c.benchmark_group("render");
    group.sample_size(10);
    group.bench_function("operator build 64x64", |b| {
        b.iter(|| RenderOperator::new(black_box(&density), 16, pose, &cfg).unwrap())
    });
    let op = RenderOperator::new(&density, 16, pose, &cfg).unwrap();
    let colors = ColorField::uniform(16, [0.5; 3]).unwrap().colors();
    group.bench_function("operator apply 64x64", |b| b.iter(|| op.apply(black_box(&colors)).unwrap()));
    group.finish();
}

criterion_group!(benches, geometry, metrics, models, rendering);
criterion_main!(benches);
