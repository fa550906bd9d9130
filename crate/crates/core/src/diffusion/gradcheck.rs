//! Finite-difference check of the training objective's parameter gradients.

use super::schedule::NoiseSchedule;
use super::train::ddpm_loss;
use super::unet::{UNet, UNetConfig};
use crate::error::Result;
use crate::tensor::{derive_seed, seeded_normal, seeded_uniform_indices, Tape, Tensor, Var};

/// Worst relative error for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub groups: Vec<GroupError>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of the loss with central differences in
/// 64-bit arithmetic, at up to `per_group` elements of every parameter.
///
/// All parameters are drawn at random (not at their initialization) so that
/// zero-initialized biases and unit norm scales are exercised too.
pub fn check_unet_gradients(config: UNetConfig, per_group: usize, seed: u64) -> Result<GradCheck> {
    const STEP: f64 = 1e-5;
    // Gradient components below this magnitude are compared absolutely.
    const FLOOR: f64 = 1e-6;

    let net = UNet::new(config.clone())?;
    let params: Vec<Tensor<f64>> = net
        .param_specs()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = seeded_normal::<f64>(&s.shape, derive_seed(seed, &[1, i as u64]))?;
            let fan: usize = s.shape.iter().skip(1).product::<usize>().max(1);
            Ok(t.scale(0.8 / (fan as f64).sqrt().max(1.0)))
        })
        .collect::<Result<_>>()?;
    let schedule = NoiseSchedule::default();
    let batch = 2;
    let x0 = seeded_normal::<f64>(
        &[
            batch,
            config.in_channels,
            config.image_size,
            config.image_size,
        ],
        derive_seed(seed, &[2]),
    )?;
    let poses: Vec<usize> = (0..batch).map(|i| i % config.pose_count).collect();
    let loss_seed = derive_seed(seed, &[3]);

    let eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::inference();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let l = ddpm_loss(&mut tape, &net, &vars, &x0, &poses, &schedule, loss_seed)?;
        tape.value(l).item()
    };

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = ddpm_loss(&mut tape, &net, &vars, &x0, &poses, &schedule, loss_seed)?;
    let grads = tape.backward(loss)?;

    let mut groups = Vec::new();
    let mut work = params.clone();
    for (i, spec) in net.param_specs().iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("parameter leaf");
        let n = params[i].numel();
        let mut idx: Vec<usize> = if n <= per_group {
            (0..n).collect()
        } else {
            seeded_uniform_indices(n, per_group, derive_seed(seed, &[4, i as u64]))
        };
        idx.sort_unstable();
        idx.dedup();
        let mut worst = 0.0f64;
        for &j in &idx {
            let orig = params[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
        }
        groups.push(GroupError {
            name: spec.name.clone(),
            checked: idx.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheck { groups })
}
