//! Deterministic DDIM updates, sampling and inversion.

use serde::{Deserialize, Serialize};

use crate::diffusion::checkpoint::DenoiserCheckpoint;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::unet::{AttnMode, KvPair, UNet};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Largest guidance strength accepted; larger values are clamped.
pub const MAX_GAMMA: f64 = 4.0;
/// Above this the outputs are known to degrade, so a warning is logged.
pub const WARN_GAMMA: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub gamma: f64,
    /// Explicit increasing timesteps; when absent a uniform stride over the
    /// schedule is used.
    pub timesteps: Option<Vec<usize>>,
    pub share_initial_noise: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            gamma: 1.5,
            timesteps: None,
            share_initial_noise: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Increasing timesteps visited by the sampler.
    pub fn subsequence(&self, schedule_len: usize) -> Result<Vec<usize>> {
        let seq = match &self.timesteps {
            Some(seq) => seq.clone(),
            None => uniform_timesteps(schedule_len, self.steps)?,
        };
        if seq.is_empty() {
            return Err(Error::invalid("sampler needs at least one timestep"));
        }
        if seq.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "timestep subsequence must be strictly increasing",
            ));
        }
        if *seq.last().unwrap() >= schedule_len {
            return Err(Error::invalid(format!(
                "timestep {} outside a schedule of {schedule_len} steps",
                seq.last().unwrap()
            )));
        }
        Ok(seq)
    }

    /// Guidance strength clamped to `[0, MAX_GAMMA]`.
    pub fn effective_gamma(&self) -> Result<f64> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::invalid(format!(
                "guidance strength must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if self.gamma > WARN_GAMMA {
            log::warn!(
                "guidance strength {} is above {WARN_GAMMA}; outputs tend to degrade",
                self.gamma
            );
        }
        Ok(self.gamma.min(MAX_GAMMA))
    }
}

/// `steps` timesteps `⌊i·T/steps⌋`, i.e. a uniform stride starting at 0.
pub fn uniform_timesteps(schedule_len: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > schedule_len {
        return Err(Error::invalid(format!(
            "step count {steps} must lie in 1..={schedule_len}"
        )));
    }
    Ok((0..steps).map(|i| i * schedule_len / steps).collect())
}

/// Moves `x` from noise level `a_from` to `a_to` (both `ᾱ` values) given the
/// noise estimate `eps`:
/// `√a_to·(x − √(1−a_from)·ε)/√a_from + √(1−a_to)·ε`.
///
/// Denoising uses `a_to > a_from`; inversion runs the same map the other way.
pub fn ddim_update<T: Float>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    a_from: f64,
    a_to: f64,
) -> Result<Tensor<T>> {
    if !(a_from > 0.0 && a_from <= 1.0 && a_to > 0.0 && a_to <= 1.0) {
        return Err(Error::invalid(format!(
            "noise levels must lie in (0, 1], got {a_from} and {a_to}"
        )));
    }
    let c_x = a_to.sqrt() / a_from.sqrt();
    let c_e = (1.0 - a_to).sqrt() - a_to.sqrt() * (1.0 - a_from).sqrt() / a_from.sqrt();
    let (c_x, c_e) = (T::from_f64(c_x), T::from_f64(c_e));
    x.zip_map(eps, |x, e| c_x * x + c_e * e)
}

/// One denoising step from timestep `t` to `t_prev` (`-1` is the clean end).
pub fn ddim_step<T: Float>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: isize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_prev >= t as isize {
        return Err(Error::invalid(format!(
            "ddim step must go backwards, got {t} -> {t_prev}"
        )));
    }
    let a_t = schedule.alpha_bar_at(t as isize)?;
    let a_prev = schedule.alpha_bar_at(t_prev)?;
    ddim_update(x_t, eps, a_t, a_prev)
}

/// Anything that predicts noise for a batch at a single timestep.
pub trait NoisePredictor<T: Float = f32> {
    fn schedule(&self) -> &NoiseSchedule;

    /// `x: [N, C, H, W]`; returns the noise estimate and, in record mode,
    /// the keys and values of every cross-frame layer.
    fn predict(
        &self,
        x: &Tensor<T>,
        t: usize,
        poses: &[usize],
        mode: AttnMode<'_, T>,
    ) -> Result<(Tensor<T>, Vec<KvPair<T>>)>;
}

/// A checkpoint ready for inference.
pub struct Denoiser<'a> {
    net: UNet,
    ckpt: &'a DenoiserCheckpoint,
}

impl<'a> Denoiser<'a> {
    pub fn new(ckpt: &'a DenoiserCheckpoint) -> Result<Self> {
        Ok(Self {
            net: ckpt.network()?,
            ckpt,
        })
    }

    pub fn network(&self) -> &UNet {
        &self.net
    }
}

impl NoisePredictor<f32> for Denoiser<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.ckpt.schedule
    }

    fn predict(
        &self,
        x: &Tensor<f32>,
        t: usize,
        poses: &[usize],
        mode: AttnMode<'_, f32>,
    ) -> Result<(Tensor<f32>, Vec<KvPair<f32>>)> {
        if t >= self.ckpt.schedule.len() {
            return Err(Error::invalid(format!(
                "timestep {t} outside a schedule of {} steps",
                self.ckpt.schedule.len()
            )));
        }
        let mut tape = Tape::inference();
        let vars: Vec<Var> = self
            .ckpt
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let xv = tape.constant(x.clone());
        let ts = vec![t; x.shape().first().copied().unwrap_or(0)];
        let out = self.net.forward(&mut tape, &vars, xv, &ts, poses, mode)?;
        Ok((tape.value(out.eps).clone(), out.kv))
    }
}

/// Keys and values of the cross-frame layers at every visited timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceKv<T: Float = f32> {
    pub timesteps: Vec<usize>,
    /// `layers[i]` belongs to `timesteps[i]`.
    pub layers: Vec<Vec<KvPair<T>>>,
}

impl<T: Float> ReferenceKv<T> {
    pub fn at(&self, t: usize) -> Result<&[KvPair<T>]> {
        self.timesteps
            .iter()
            .position(|&s| s == t)
            .map(|i| self.layers[i].as_slice())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "no reference keys/values recorded for timestep {t}"
                ))
            })
    }
}

/// How attention behaves during a sampling run.
#[derive(Clone, Copy, Debug)]
pub enum Guidance<'a, T: Float = f32> {
    /// Plain self-attention.
    Standard,
    /// Plain self-attention, recording keys and values.
    Record,
    /// Cross-frame attention to `kv`, mixing soft and hard predictions
    /// with strength `gamma`.
    Reference { kv: &'a ReferenceKv<T>, gamma: f64 },
}

#[derive(Clone, Debug)]
pub struct SampleOutput<T: Float = f32> {
    pub image: Tensor<T>,
    /// Present for [`Guidance::Record`].
    pub kv: Option<ReferenceKv<T>>,
}

fn check_image<T: Float>(x: &Tensor<T>) -> Result<()> {
    if x.ndim() != 4 {
        return Err(Error::shape(format!(
            "expected [N, C, H, W], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Denoises `noise` over the subsequence from the last timestep down to the
/// clean end.
pub fn ddim_sample<T: Float, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    noise: &Tensor<T>,
    poses: &[usize],
    config: &SamplerConfig,
    guidance: Guidance<'_, T>,
) -> Result<SampleOutput<T>> {
    check_image(noise)?;
    let schedule = model.schedule();
    let seq = config.subsequence(schedule.len())?;
    let gamma = match guidance {
        Guidance::Reference { gamma, .. } => SamplerConfig {
            gamma,
            ..config.clone()
        }
        .effective_gamma()?,
        _ => 1.0,
    };
    let mut x = noise.clone();
    let mut recorded = Vec::new();
    for i in (0..seq.len()).rev() {
        let t = seq[i];
        let t_prev = if i == 0 { -1 } else { seq[i - 1] as isize };
        let eps = match guidance {
            Guidance::Standard => model.predict(&x, t, poses, AttnMode::Standard)?.0,
            Guidance::Record => {
                let (eps, kv) = model.predict(&x, t, poses, AttnMode::Record)?;
                recorded.push((t, kv));
                eps
            }
            Guidance::Reference { kv, .. } => {
                let layers = kv.at(t)?;
                let soft = model
                    .predict(
                        &x,
                        t,
                        poses,
                        AttnMode::Reference {
                            kv: layers,
                            hard: false,
                        },
                    )?
                    .0;
                if gamma == 1.0 {
                    soft
                } else {
                    let hard = model
                        .predict(
                            &x,
                            t,
                            poses,
                            AttnMode::Reference {
                                kv: layers,
                                hard: true,
                            },
                        )?
                        .0;
                    super::attention::hag_combine(&soft, &hard, gamma)?
                }
            }
        };
        x = ddim_step(&x, &eps, t, t_prev, schedule)?;
    }
    let kv = matches!(guidance, Guidance::Record).then(|| {
        recorded.reverse();
        let (timesteps, layers) = recorded.into_iter().unzip();
        ReferenceKv { timesteps, layers }
    });
    Ok(SampleOutput { image: x, kv })
}

#[derive(Clone, Debug)]
pub struct Inversion<T: Float = f32> {
    pub noise: Tensor<T>,
    pub kv: ReferenceKv<T>,
}

/// Runs the sampler backwards from a clean image to its noise, using the
/// prediction at the current point for each step and recording the
/// cross-frame keys and values on the way.
pub fn ddim_invert<T: Float, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    image: &Tensor<T>,
    poses: &[usize],
    config: &SamplerConfig,
) -> Result<Inversion<T>> {
    check_image(image)?;
    let schedule = model.schedule();
    let seq = config.subsequence(schedule.len())?;
    let mut x = image.clone();
    let mut a_cur = 1.0;
    let mut layers = Vec::with_capacity(seq.len());
    for &t in &seq {
        let (eps, kv) = model.predict(&x, t, poses, AttnMode::Record)?;
        let a_next = schedule.alpha_bar_at(t as isize)?;
        x = ddim_update(&x, &eps, a_cur, a_next)?;
        a_cur = a_next;
        layers.push(kv);
    }
    Ok(Inversion {
        noise: x,
        kv: ReferenceKv {
            timesteps: seq,
            layers,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{make_schedule, mix};
    use crate::tensor::seeded_normal;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn worked_example() {
        let x = ddim_update(&scalar(1.1), &scalar(0.5), 0.64, 0.81).unwrap();
        let want = 0.9 * 1.0 + 0.19f64.sqrt() * 0.5;
        assert!((x.data()[0] - want).abs() < 1e-12);
        assert!((x.data()[0] - 1.11795).abs() < 1e-5);
    }

    #[test]
    fn perfect_noise_estimate_recovers_x0() {
        let x0 = scalar(0.3);
        let e = scalar(-1.2);
        let xt = mix(&x0, &e, 0.64).unwrap();
        let back = ddim_update(&xt, &e, 0.64, 1.0).unwrap();
        assert!((back.data()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn equal_levels_are_a_fixed_point() {
        let x = seeded_normal::<f64>(&[10], 1).unwrap();
        let e = seeded_normal::<f64>(&[10], 2).unwrap();
        let y = ddim_update(&x, &e, 0.37, 0.37).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn step_validates_indices() {
        let s = make_schedule(10, 0.01, 0.1).unwrap();
        let x = scalar(0.0);
        assert!(ddim_step(&x, &x, 3, 3, &s).is_err());
        assert!(ddim_step(&x, &x, 10, 3, &s).is_err());
        assert!(ddim_step(&x, &x, 3, -1, &s).is_ok());
    }

    #[test]
    fn uniform_stride() {
        assert_eq!(uniform_timesteps(1000, 50).unwrap()[..3], [0, 20, 40]);
        assert_eq!(uniform_timesteps(1000, 50).unwrap().last(), Some(&980));
        assert_eq!(uniform_timesteps(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(uniform_timesteps(5, 6).is_err());
        assert!(uniform_timesteps(5, 0).is_err());
    }

    #[test]
    fn gamma_is_clamped() {
        let c = SamplerConfig {
            gamma: 9.0,
            ..SamplerConfig::default()
        };
        assert_eq!(c.effective_gamma().unwrap(), MAX_GAMMA);
        let c = SamplerConfig {
            gamma: -1.0,
            ..SamplerConfig::default()
        };
        assert!(c.effective_gamma().is_err());
        assert_eq!(SamplerConfig::default().gamma, 1.5);
        assert_eq!(SamplerConfig::default().steps, 50);
    }
}
