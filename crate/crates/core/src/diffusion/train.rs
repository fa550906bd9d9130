//! Noise-prediction objective and the minibatch Adam loop.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::DenoiserCheckpoint;
use super::schedule::{mix, NoiseSchedule};
use super::unet::{AttnMode, UNet};
use crate::error::{Error, Result};
use crate::tensor::{
    derive_seed, seeded_normal, seeded_uniform_indices, AdamConfig, AdamState, Float, Tape, Tensor,
    Var,
};

const STREAM_TIMESTEPS: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_BATCH: u64 = 4;

/// Timesteps and noise for one loss evaluation, derived from `seed`.
pub fn loss_draws<T: Float>(
    shape: &[usize],
    steps: usize,
    seed: u64,
) -> Result<(Vec<usize>, Tensor<T>)> {
    let t = seeded_uniform_indices(steps, shape[0], derive_seed(seed, &[STREAM_TIMESTEPS]));
    let eps = seeded_normal(shape, derive_seed(seed, &[STREAM_NOISE]))?;
    Ok((t, eps))
}

/// Mean squared error between `denoise(x_t, t)` and the noise used to form
/// `x_t` from the clean batch `x0: [N, C, H, W]`.
pub fn ddpm_loss_with<T: Float>(
    tape: &mut Tape<T>,
    x0: &Tensor<T>,
    schedule: &NoiseSchedule,
    seed: u64,
    denoise: impl FnOnce(&mut Tape<T>, Var, &[usize], &Tensor<T>) -> Result<Var>,
) -> Result<Var> {
    if x0.ndim() != 4 {
        return Err(Error::shape(format!(
            "training batch {:?} is not [N, C, H, W]",
            x0.shape()
        )));
    }
    let (t, eps) = loss_draws::<T>(x0.shape(), schedule.len(), seed)?;
    let n = x0.shape()[0];
    let per = x0.numel() / n;
    let mut xt = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let a = schedule.alpha_bar[ti];
        let s = Tensor::from_vec(&[per], x0.data()[i * per..(i + 1) * per].to_vec())?;
        let e = Tensor::from_vec(&[per], eps.data()[i * per..(i + 1) * per].to_vec())?;
        xt.extend_from_slice(mix(&s, &e, a)?.data());
    }
    let xt = tape.constant(Tensor::from_vec(x0.shape(), xt)?);
    let pred = denoise(tape, xt, &t, &eps)?;
    let target = tape.constant(eps);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// The objective for `net` with parameters `params` already on `tape`.
pub fn ddpm_loss<T: Float>(
    tape: &mut Tape<T>,
    net: &UNet,
    params: &[Var],
    x0: &Tensor<T>,
    poses: &[usize],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Var> {
    ddpm_loss_with(tape, x0, schedule, seed, |tape, xt, t, _| {
        Ok(net
            .forward(tape, params, xt, t, poses, AttnMode::Standard)?
            .eps)
    })
}

/// Images in `[-1, 1]` with their pose labels.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    /// Each `[C, H, W]`.
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl TrainingSet {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} pose labels",
                images.len(),
                labels.len()
            )));
        }
        let shape = images[0].shape();
        if let Some(bad) = images.iter().find(|im| im.shape() != shape) {
            return Err(Error::shape(format!(
                "training images differ in shape: {:?} and {:?}",
                shape,
                bad.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let items: Vec<Tensor<f32>> = idx
            .iter()
            .map(|&i| {
                let im = &self.images[i];
                let mut shape = vec![1];
                shape.extend_from_slice(im.shape());
                im.reshape(&shape)
            })
            .collect::<Result<_>>()?;
        let x = Tensor::stack_batch(&items)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            smoothing_window: 100,
        }
    }
}

/// Per-step record written to the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean over the trailing `smoothing_window` steps.
    pub smoothed: f64,
}

/// Callbacks fired by [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _record: &LossRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _ckpt: &DenoiserCheckpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes the loss CSV and periodic checkpoints into a run directory.
pub struct RunDirObserver {
    log: std::io::BufWriter<std::fs::File>,
    dir: std::path::PathBuf,
}

impl RunDirObserver {
    /// Appends to an existing `loss.csv` when resuming.
    pub fn new(dir: &Path, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("loss.csv");
        let fresh = !resume || !path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&path)?;
        let mut log = std::io::BufWriter::new(file);
        if fresh {
            writeln!(log, "step,loss,smoothed")?;
        }
        Ok(Self {
            log,
            dir: dir.to_path_buf(),
        })
    }
}

impl TrainObserver for RunDirObserver {
    fn on_step(&mut self, r: &LossRecord) -> Result<()> {
        writeln!(self.log, "{},{},{}", r.step, r.loss, r.smoothed)?;
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &DenoiserCheckpoint) -> Result<()> {
        self.log.flush()?;
        ckpt.save(&self.dir.join(format!("ckpt_{:07}.mrgc", ckpt.step)))?;
        ckpt.save(&self.dir.join("latest.mrgc"))
    }
}

/// Dataset indices for global step `step`: epochs are seeded permutations,
/// read in consecutive runs of `batch` so that resuming at any step replays
/// the same sequence.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = step as u128 * batch as u128;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u128, Vec<usize>)> = None;
    for j in 0..batch as u128 {
        let pos = start + j;
        let epoch = pos / n as u128;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SHUFFLE, epoch as u64]));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u128) as usize]);
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
}

/// Runs `config.iterations` Adam steps starting from `ckpt.step`.
///
/// The optimizer state lives in the checkpoint so a saved run resumes
/// exactly. A non-finite loss stops training with the step in the error.
pub fn train(
    ckpt: &mut DenoiserCheckpoint,
    data: &TrainingSet,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    train_resuming(ckpt, data, config, &[], observer)
}

/// [`train`] seeded with the losses logged before a resume, so the smoothed
/// curve continues exactly as in an uninterrupted run.
pub fn train_resuming(
    ckpt: &mut DenoiserCheckpoint,
    data: &TrainingSet,
    config: &TrainConfig,
    prior_losses: &[f64],
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    let net = ckpt.network()?;
    let c = net.config();
    let want = [c.in_channels, c.image_size, c.image_size];
    if data.images[0].shape() != want {
        return Err(Error::shape(format!(
            "training images are {:?}, network expects {want:?}",
            data.images[0].shape()
        )));
    }
    if let Some(&p) = data.labels.iter().find(|&&p| p >= c.pose_count) {
        return Err(Error::invalid(format!(
            "pose label {p} out of range for a network with {} poses",
            c.pose_count
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if config.smoothing_window == 0 {
        return Err(Error::invalid("smoothing_window must be positive"));
    }
    let mut opt = match ckpt.optimizer.take() {
        Some(o) => o,
        None => AdamState::new(config.adam, &ckpt.params)?,
    };
    opt.config = config.adam;

    let mut window: VecDeque<f64> = VecDeque::with_capacity(config.smoothing_window);
    let keep = prior_losses.len().saturating_sub(config.smoothing_window);
    window.extend(&prior_losses[keep..]);
    let mut report = TrainReport::default();
    let end = ckpt.step + config.iterations;
    let result = (|| -> Result<()> {
        while ckpt.step < end {
            let step = ckpt.step;
            let idx = batch_indices(data.len(), config.batch_size, config.seed, step);
            let (x0, poses) = data.batch(&idx)?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = ckpt
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), true))
                .collect();
            let seed = derive_seed(config.seed, &[STREAM_BATCH, step]);
            let loss = ddpm_loss(&mut tape, &net, &vars, &x0, &poses, &ckpt.schedule, seed)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars
                .iter()
                .map(|&v| grads.get(v).expect("every parameter is a leaf"))
                .collect();
            opt.step(&mut ckpt.params, &grads)?;
            ckpt.step += 1;

            if window.len() == config.smoothing_window {
                window.pop_front();
            }
            window.push_back(value);
            let record = LossRecord {
                step: ckpt.step,
                loss: value,
                smoothed: window.iter().sum::<f64>() / window.len() as f64,
            };
            observer.on_step(&record)?;
            report.records.push(record);

            if config.checkpoint_every > 0 && ckpt.step % config.checkpoint_every == 0 {
                ckpt.optimizer = Some(opt.clone());
                observer.on_checkpoint(ckpt)?;
            }
        }
        Ok(())
    })();
    ckpt.optimizer = Some(opt);
    result.map(|_| report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use crate::diffusion::unet::UNetConfig;

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let s = NoiseSchedule::default();
        let x0 = seeded_normal::<f64>(&[3, 3, 4, 4], 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let loss = ddpm_loss_with(&mut tape, &x0, &s, 5, |tape, _, _, eps| {
            Ok(tape.constant(eps.clone()))
        })
        .unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn zero_denoiser_loss_is_noise_energy() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::<f64>::zeros(&[16, 3, 16, 16]);
        let mut tape = Tape::<f64>::new();
        let loss = ddpm_loss_with(&mut tape, &x0, &s, 9, |tape, _, _, eps| {
            Ok(tape.constant(Tensor::zeros(eps.shape())))
        })
        .unwrap();
        assert!((tape.value(loss).item().unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn loss_is_deterministic() {
        let net = UNet::new(UNetConfig::tiny(2)).unwrap();
        let params = net.init_params(0).unwrap();
        let x0 = seeded_normal::<f32>(&[2, 3, 8, 8], 3).unwrap();
        let s = make_schedule(100, 1e-3, 0.05).unwrap();
        let eval = || {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
            let l = ddpm_loss(&mut tape, &net, &vars, &x0, &[0, 1], &s, 11).unwrap();
            tape.value(l).item().unwrap()
        };
        assert_eq!(eval().to_bits(), eval().to_bits());
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, 3, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 4, 3, 2), batch_indices(10, 4, 3, 2));
    }

    fn toy_set() -> TrainingSet {
        let images = (0..6)
            .map(|i| {
                seeded_normal::<f32>(&[3, 8, 8], i)
                    .unwrap()
                    .map(|v| v.clamp(-1.0, 1.0))
            })
            .collect();
        TrainingSet::new(images, vec![0, 1, 2, 0, 1, 2]).unwrap()
    }

    fn tiny_ckpt() -> DenoiserCheckpoint {
        DenoiserCheckpoint::init(
            UNetConfig::tiny(3),
            make_schedule(50, 1e-3, 0.1).unwrap(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let init = tiny_ckpt();
        let mut c = init.clone();
        let config = TrainConfig {
            iterations: 0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&mut c, &toy_set(), &config, &mut ()).unwrap();
        assert!(c.weights_bit_eq(&init));
        assert_eq!(c.step, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let config = TrainConfig {
            iterations: 4,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut full = tiny_ckpt();
        train(&mut full, &toy_set(), &config, &mut ()).unwrap();

        let mut part = tiny_ckpt();
        let half = TrainConfig {
            iterations: 2,
            ..config.clone()
        };
        train(&mut part, &toy_set(), &half, &mut ()).unwrap();
        let mut resumed = DenoiserCheckpoint::decode(&part.encode().unwrap()).unwrap();
        train(&mut resumed, &toy_set(), &half, &mut ()).unwrap();
        assert_eq!(resumed.step, 4);
        assert!(resumed.weights_bit_eq(&full));
    }

    #[test]
    fn rejects_bad_labels() {
        let mut c = tiny_ckpt();
        let mut set = toy_set();
        set.labels[0] = 3;
        assert!(train(&mut c, &set, &TrainConfig::default(), &mut ()).is_err());
    }
}
