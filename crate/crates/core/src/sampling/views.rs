//! Novel views of one object at a list of pose labels.

use super::ddim::{ddim_invert, ddim_sample, Guidance, NoisePredictor, ReferenceKv, SamplerConfig};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, seeded_normal, Float, Tensor};

const STREAM_VIEW_NOISE: u64 = 11;

/// Where the reference view comes from.
#[derive(Clone, Debug)]
pub enum ReferenceSource<T: Float = f32> {
    /// A real image `[C, H, W]` in `[-1, 1]` and its inferred pose label.
    Image { image: Tensor<T>, pose: usize },
    /// Initial noise `[C, H, W]` sampled at the chosen pose.
    Noise { noise: Tensor<T>, pose: usize },
}

impl<T: Float> ReferenceSource<T> {
    pub fn pose(&self) -> usize {
        match self {
            ReferenceSource::Image { pose, .. } | ReferenceSource::Noise { pose, .. } => *pose,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ViewRequest<T: Float = f32> {
    pub reference: ReferenceSource<T>,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct NovelViews<T: Float = f32> {
    /// Initial noise of the reference trajectory, `[C, H, W]`.
    pub reference_noise: Tensor<T>,
    /// The sampled reference for noise requests; the input for image requests.
    pub reference_image: Tensor<T>,
    pub reference_kv: ReferenceKv<T>,
    /// One `[C, H, W]` image per target, in request order.
    pub views: Vec<Tensor<T>>,
}

fn batched<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.reshape(&s)
}

fn unbatched<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.reshape(&x.shape()[1..])
}

/// Reference trajectory first, then every target on its own.
///
/// Each target is sampled independently from the reference keys and values
/// with batch size one, so any order or subset of targets yields the same
/// per-view images.
pub fn generate_novel_views<T: Float, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    request: &ViewRequest<T>,
    config: &SamplerConfig,
    pose_count: usize,
) -> Result<NovelViews<T>> {
    let ref_pose = request.reference.pose();
    for &p in std::iter::once(&ref_pose).chain(&request.targets) {
        if p >= pose_count {
            return Err(Error::invalid(format!(
                "pose label {p} out of range 0..{pose_count}"
            )));
        }
    }
    let gamma = config.effective_gamma()?;

    let (reference_noise, reference_image, kv) = match &request.reference {
        ReferenceSource::Image { image, .. } => {
            let inv = ddim_invert(model, &batched(image)?, &[ref_pose], config)?;
            (unbatched(&inv.noise)?, image.clone(), inv.kv)
        }
        ReferenceSource::Noise { noise, .. } => {
            let out = ddim_sample(
                model,
                &batched(noise)?,
                &[ref_pose],
                config,
                Guidance::Record,
            )?;
            let kv = out.kv.expect("record mode returns keys and values");
            (noise.clone(), unbatched(&out.image)?, kv)
        }
    };

    let mut views = Vec::with_capacity(request.targets.len());
    for &p in &request.targets {
        let noise = if config.share_initial_noise {
            reference_noise.clone()
        } else {
            seeded_normal(
                reference_noise.shape(),
                derive_seed(config.seed, &[STREAM_VIEW_NOISE, p as u64]),
            )?
        };
        let out = ddim_sample(
            model,
            &batched(&noise)?,
            &[p],
            config,
            Guidance::Reference { kv: &kv, gamma },
        )?;
        views.push(unbatched(&out.image)?);
    }
    Ok(NovelViews {
        reference_noise,
        reference_image,
        reference_kv: kv,
        views,
    })
}
