//! Fixtures shared by the kernel benchmarks.

use poseview::diffusion::{DenoiserCheckpoint, NoiseSchedule, UNetConfig};
use poseview::tensor::{seeded_normal, Tensor};

/// `n` points in `d` dimensions scattered around `k` well-separated centers.
pub fn clustered_points(n: usize, d: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let jitter = seeded_normal::<f64>(&[n, d], seed).expect("valid shape");
    jitter
        .data()
        .chunks(d)
        .enumerate()
        .map(|(i, row)| {
            let center = (i % k) as f64 * 10.0;
            row.iter().map(|x| center + 0.5 * x).collect()
        })
        .collect()
}

/// Freshly initialized toy-sized denoiser.
pub fn toy_checkpoint(pose_count: usize) -> DenoiserCheckpoint {
    DenoiserCheckpoint::init(UNetConfig::toy(pose_count), NoiseSchedule::default(), 0)
        .expect("toy config is valid")
}

/// Batch of standard normal images matching `config`.
pub fn noise_batch(config: &UNetConfig, batch: usize, seed: u64) -> Tensor<f32> {
    let s = config.image_size;
    seeded_normal(&[batch, config.in_channels, s, s], seed).expect("valid shape")
}
