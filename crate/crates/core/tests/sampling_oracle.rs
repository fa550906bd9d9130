//! Sampler algebra against planted trajectories and exact-identity checks.

use poseview::diffusion::schedule::mix;
use poseview::diffusion::{AttnMode, DenoiserCheckpoint, KvPair, NoiseSchedule, UNetConfig};
use poseview::sampling::{
    cross_frame_attention, ddim_invert, ddim_sample, ddim_update, generate_novel_views,
    hard_attention, Denoiser, Guidance, NoisePredictor, ReferenceSource, SamplerConfig,
    ViewRequest,
};
use poseview::tensor::{seeded_normal, Tensor};
use poseview::Result;
use proptest::prelude::*;

/// Returns the exact noise that separates `x` from a known clean image.
struct Planted {
    schedule: NoiseSchedule,
    x0: Tensor<f64>,
}

impl NoisePredictor<f64> for Planted {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(
        &self,
        x: &Tensor<f64>,
        t: usize,
        _: &[usize],
        _: AttnMode<'_, f64>,
    ) -> Result<(Tensor<f64>, Vec<KvPair<f64>>)> {
        let a = self.schedule.alpha_bar[t];
        let eps = x.zip_map(&self.x0, |x, x0| (x - a.sqrt() * x0) / (1.0 - a).sqrt())?;
        Ok((eps, Vec::new()))
    }
}

/// Predicts zero noise everywhere.
struct Zero(NoiseSchedule);

impl NoisePredictor<f64> for Zero {
    fn schedule(&self) -> &NoiseSchedule {
        &self.0
    }

    fn predict(
        &self,
        x: &Tensor<f64>,
        _: usize,
        _: &[usize],
        _: AttnMode<'_, f64>,
    ) -> Result<(Tensor<f64>, Vec<KvPair<f64>>)> {
        Ok((Tensor::zeros(x.shape()), Vec::new()))
    }
}

#[test]
fn planted_trajectory_is_recovered_with_every_step() {
    let schedule = NoiseSchedule::default();
    let x0 = seeded_normal::<f64>(&[1, 3, 8, 8], 1)
        .unwrap()
        .map(|v| v.clamp(-1.0, 1.0));
    let eps = seeded_normal::<f64>(&[1, 3, 8, 8], 2).unwrap();
    let xt = mix(&x0, &eps, *schedule.alpha_bar.last().unwrap()).unwrap();
    let model = Planted {
        schedule: schedule.clone(),
        x0: x0.clone(),
    };
    let config = SamplerConfig {
        steps: schedule.len(),
        ..SamplerConfig::default()
    };
    let out = ddim_sample(&model, &xt, &[0], &config, Guidance::Standard).unwrap();
    assert!(out.image.max_abs_diff(&x0).unwrap() < 1e-4);
}

#[test]
fn zero_denoiser_inversion_is_pure_rescaling() {
    let schedule = NoiseSchedule::default();
    let x0 = seeded_normal::<f64>(&[1, 3, 4, 4], 3).unwrap();
    let config = SamplerConfig::default();
    let inv = ddim_invert(&Zero(schedule.clone()), &x0, &[0], &config).unwrap();
    let last = *config.subsequence(schedule.len()).unwrap().last().unwrap();
    let want = x0.scale(schedule.alpha_bar[last].sqrt());
    assert!(inv.noise.max_abs_diff(&want).unwrap() < 1e-12);
}

fn tiny() -> DenoiserCheckpoint {
    DenoiserCheckpoint::init(UNetConfig::tiny(3), NoiseSchedule::default(), 5).unwrap()
}

fn fast() -> SamplerConfig {
    SamplerConfig {
        steps: 8,
        ..SamplerConfig::default()
    }
}

#[test]
fn self_reference_trajectory_matches_standard() {
    let ckpt = tiny();
    let model = Denoiser::new(&ckpt).unwrap();
    let noise = seeded_normal::<f32>(&[1, 3, 8, 8], 7).unwrap();
    let cfg = fast();
    let plain = ddim_sample(&model, &noise, &[1], &cfg, Guidance::Standard).unwrap();
    let rec = ddim_sample(&model, &noise, &[1], &cfg, Guidance::Record).unwrap();
    assert!(rec.image.bit_eq(&plain.image));
    let kv = rec.kv.unwrap();
    assert_eq!(kv.timesteps.len(), 8);
    let guided = ddim_sample(
        &model,
        &noise,
        &[1],
        &cfg,
        Guidance::Reference {
            kv: &kv,
            gamma: 1.0,
        },
    )
    .unwrap();
    assert!(guided.image.max_abs_diff(&plain.image).unwrap() <= 1e-5);
}

#[test]
fn sampling_and_inversion_are_deterministic() {
    let ckpt = tiny();
    let model = Denoiser::new(&ckpt).unwrap();
    let noise = seeded_normal::<f32>(&[1, 3, 8, 8], 8).unwrap();
    let a = ddim_sample(&model, &noise, &[2], &fast(), Guidance::Standard).unwrap();
    let b = ddim_sample(&model, &noise, &[2], &fast(), Guidance::Standard).unwrap();
    assert!(a.image.bit_eq(&b.image));
    let i1 = ddim_invert(&model, &a.image, &[2], &fast()).unwrap();
    let i2 = ddim_invert(&model, &a.image, &[2], &fast()).unwrap();
    assert!(i1.noise.bit_eq(&i2.noise));
    assert_eq!(i1.kv, i2.kv);
}

#[test]
fn same_pose_target_reproduces_reference() {
    let ckpt = tiny();
    let model = Denoiser::new(&ckpt).unwrap();
    let request = ViewRequest {
        reference: ReferenceSource::Noise {
            noise: seeded_normal::<f32>(&[3, 8, 8], 9).unwrap(),
            pose: 1,
        },
        targets: vec![1],
    };
    let cfg = SamplerConfig {
        gamma: 1.0,
        ..fast()
    };
    let out = generate_novel_views(&model, &request, &cfg, 3).unwrap();
    assert!(out.views[0].max_abs_diff(&out.reference_image).unwrap() <= 1e-4);
}

#[test]
fn targets_are_order_and_subset_invariant() {
    let ckpt = tiny();
    let model = Denoiser::new(&ckpt).unwrap();
    let noise = seeded_normal::<f32>(&[3, 8, 8], 10).unwrap();
    let run = |targets: Vec<usize>| {
        let request = ViewRequest {
            reference: ReferenceSource::Noise {
                noise: noise.clone(),
                pose: 0,
            },
            targets,
        };
        generate_novel_views(&model, &request, &fast(), 3)
            .unwrap()
            .views
    };
    let abc = run(vec![0, 1, 2]);
    let cab = run(vec![2, 0, 1]);
    let b = run(vec![1]);
    assert!(abc[0].bit_eq(&cab[1]));
    assert!(abc[1].bit_eq(&cab[2]));
    assert!(abc[2].bit_eq(&cab[0]));
    assert!(abc[1].bit_eq(&b[0]));
    // guidance actually changes the targets
    let soft = {
        let request = ViewRequest {
            reference: ReferenceSource::Noise {
                noise: noise.clone(),
                pose: 0,
            },
            targets: vec![1],
        };
        generate_novel_views(
            &model,
            &request,
            &SamplerConfig {
                gamma: 1.0,
                ..fast()
            },
            3,
        )
        .unwrap()
        .views
    };
    assert!(soft[0].max_abs_diff(&b[0]).unwrap() > 0.0);
}

#[test]
fn image_reference_and_invalid_poses() {
    let ckpt = tiny();
    let model = Denoiser::new(&ckpt).unwrap();
    let image = seeded_normal::<f32>(&[3, 8, 8], 12)
        .unwrap()
        .map(|v| v.clamp(-1.0, 1.0));
    let request = ViewRequest {
        reference: ReferenceSource::Image {
            image: image.clone(),
            pose: 0,
        },
        targets: vec![2],
    };
    let out = generate_novel_views(&model, &request, &fast(), 3).unwrap();
    assert_eq!(out.views[0].shape(), &[3, 8, 8]);
    assert_eq!(out.reference_kv.timesteps.len(), 8);
    let bad = ViewRequest {
        reference: ReferenceSource::Image { image, pose: 0 },
        targets: vec![3],
    };
    assert!(generate_novel_views(&model, &bad, &fast(), 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_and_inverse_compose_to_identity(
        a in 0.01f64..0.999,
        b in 0.01f64..0.999,
        seed in 0u64..1000,
    ) {
        let x = seeded_normal::<f64>(&[16], seed).unwrap();
        let eps = x.scale(0.7);
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        let y = ddim_update(&x, &eps, lo, hi).unwrap();
        let back = ddim_update(&y, &eps, hi, lo).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() <= 1e-10);
    }

    #[test]
    fn hard_rows_come_from_values(n in 1usize..6, m in 1usize..6, d in 1usize..4, seed in 0u64..500) {
        let q = seeded_normal::<f64>(&[n, d], seed).unwrap();
        let k = seeded_normal::<f64>(&[m, d], seed + 1).unwrap();
        let v = seeded_normal::<f64>(&[m, 2], seed + 2).unwrap();
        let out = hard_attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(2) {
            prop_assert!(v.data().chunks(2).any(|r| r == row));
        }
    }

    #[test]
    fn cfa_rows_are_convex_combinations(n in 1usize..6, m in 1usize..6, seed in 0u64..500) {
        let q = seeded_normal::<f64>(&[n, 3], seed).unwrap();
        let k = seeded_normal::<f64>(&[m, 3], seed + 1).unwrap();
        let v = seeded_normal::<f64>(&[m, 1], seed + 2).unwrap();
        let out = cross_frame_attention(&q, &k, &v).unwrap();
        let lo = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &o in out.data() {
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
        }
    }
}
