use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use poseview::diffusion::{ddpm_loss, AttnMode};
use poseview::kmeans::{kmeans, KmeansConfig};
use poseview::sampling::{ddim_step, Denoiser, NoisePredictor};
use poseview::tensor::{seeded_normal, Tape, Tensor};
use poseview_bench::{clustered_points, noise_batch, toy_checkpoint};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for (ch, size) in [(16, 32), (32, 16), (64, 8)] {
        let x = seeded_normal::<f32>(&[8, ch, size, size], 1).unwrap();
        let w = seeded_normal::<f32>(&[ch, ch, 3, 3], 2).unwrap();
        let b = Tensor::zeros(&[ch]);
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{ch}ch_{size}px")),
            &(),
            |bench, _| bench.iter(|| black_box(x.conv2d(&w, Some(&b), 1, 1).unwrap())),
        );
    }
    g.finish();
}

fn unet(c: &mut Criterion) {
    let ckpt = toy_checkpoint(8);
    let model = Denoiser::new(&ckpt).unwrap();
    let x1 = noise_batch(&ckpt.config, 1, 3);
    c.bench_function("unet_forward_toy_b1", |b| {
        b.iter(|| black_box(model.predict(&x1, 500, &[0], AttnMode::Standard).unwrap()))
    });

    let x0 = noise_batch(&ckpt.config, 8, 4);
    let poses: Vec<usize> = (0..8).collect();
    let net = ckpt.network().unwrap();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    g.bench_function("loss_and_backward_toy_b8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let params: Vec<_> = ckpt
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), true))
                .collect();
            let loss = ddpm_loss(&mut tape, &net, &params, &x0, &poses, &ckpt.schedule, 7).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    g.finish();
}

fn ddim(c: &mut Criterion) {
    let ckpt = toy_checkpoint(8);
    let x = noise_batch(&ckpt.config, 1, 5);
    let eps = noise_batch(&ckpt.config, 1, 6);
    c.bench_function("ddim_step_update", |b| {
        b.iter(|| black_box(ddim_step(&x, &eps, 500, 480, &ckpt.schedule).unwrap()))
    });
}

fn cluster(c: &mut Criterion) {
    let points = clustered_points(1600, 3, 8, 9);
    c.bench_function("kmeans_1600x3_k8", |b| {
        b.iter(|| black_box(kmeans(&points, KmeansConfig::new(8, 0)).unwrap()))
    });
}

criterion_group!(benches, conv, unet, ddim, cluster);
criterion_main!(benches);
