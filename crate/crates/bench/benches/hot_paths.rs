use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use splatraj_bench::Fixture;
use splatraj_core::render::{pose_photometric_gradient, splat_render};

fn render(c: &mut Criterion) {
    let f = Fixture::desk();
    let posed = f.posed_cloud();
    c.bench_function("render_desk_128", |b| b.iter(|| splat_render(black_box(&posed), &f.camera)));
}

fn ssim_loss(c: &mut Criterion) {
    let f = Fixture::desk();
    let image = splat_render(&f.posed_cloud(), &f.camera);
    let target = f.photometric_target();
    let mut group = c.benchmark_group("photometric_loss");
    group.bench_function("value", |b| b.iter(|| target.evaluate(black_box(&image), false).unwrap()));
    group.bench_function("value_and_image_gradient", |b| {
        b.iter(|| target.evaluate(black_box(&image), true).unwrap())
    });
    group.finish();
}

fn pose_gradient(c: &mut Criterion) {
    let f = Fixture::desk();
    c.bench_function("pose_gradient_desk_128", |b| {
        b.iter(|| pose_photometric_gradient(black_box(&f.pose), &f.cloud, &f.camera, &f.target, 0.2).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = render, ssim_loss, pose_gradient
}
criterion_main!(benches);
