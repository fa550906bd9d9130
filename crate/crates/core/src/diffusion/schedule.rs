//! Variance schedule and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    /// Cumulative products `∏_{s≤t} (1 − β_s)`.
    pub alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `ᾱ` at step `t`, with `t = -1` standing for the clean endpoint `ᾱ = 1`.
    pub fn alpha_bar_at(&self, t: isize) -> Result<f64> {
        if t == -1 {
            return Ok(1.0);
        }
        usize::try_from(t)
            .ok()
            .and_then(|t| self.alpha_bar.get(t).copied())
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside [-1, {})", self.len())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() < 2 || self.beta.len() != self.alpha_bar.len() {
            return Err(Error::invalid("schedule needs at least two matching steps"));
        }
        if self.beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let mut prod = 1.0;
        for (b, a) in self.beta.iter().zip(&self.alpha_bar) {
            prod *= 1.0 - b;
            if (prod - a).abs() > 1e-6 {
                return Err(Error::invalid(
                    "alpha_bar is not the cumulative product of 1 - beta",
                ));
            }
        }
        Ok(())
    }
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut prod = 1.0;
    let alpha_bar = beta
        .iter()
        .map(|b| {
            prod *= 1.0 - b;
            prod
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha_bar })
}

/// `√ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
pub fn forward_diffuse<T: Float>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let a = schedule.alpha_bar_at(t as isize)?;
    mix(x0, eps, a)
}

/// Forward mix for an explicit `ᾱ`.
pub fn mix<T: Float>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    let (s, n) = (
        T::from_f64(alpha_bar.sqrt()),
        T::from_f64((1.0 - alpha_bar).sqrt()),
    );
    x0.zip_map(eps, |x, e| s * x + n * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_normal;

    #[test]
    fn two_step_product() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_decays() {
        let s = NoiseSchedule::default();
        s.validate().unwrap();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[0] > 0.999);
        assert!(*s.alpha_bar.last().unwrap() < 5e-2);
    }

    #[test]
    fn constant_beta_is_geometric() {
        let s = make_schedule(50, 0.03, 0.03).unwrap();
        for (t, a) in s.alpha_bar.iter().enumerate() {
            assert!((a - 0.97f64.powi(t as i32 + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::default().alpha_bar_at(1000).is_err());
        assert!(NoiseSchedule::default().alpha_bar_at(-2).is_err());
    }

    #[test]
    fn diffuse_substitution_and_endpoints() {
        let x0 = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        let e = Tensor::<f64>::from_vec(&[1], vec![0.5]).unwrap();
        assert!((mix(&x0, &e, 0.64).unwrap().item().unwrap() - 1.1).abs() < 1e-12);
        assert_eq!(mix(&x0, &e, 1.0).unwrap().item().unwrap(), 1.0);
        assert_eq!(mix(&x0, &e, 0.0).unwrap().item().unwrap(), 0.5);
        assert!(forward_diffuse(&x0, 1000, &e, &NoiseSchedule::default()).is_err());
    }

    #[test]
    fn marginal_moments() {
        let s = NoiseSchedule::default();
        let n = 10_000;
        let eps = seeded_normal::<f64>(&[n], 42).unwrap();
        for t in [10, 300, 600] {
            let x0 = Tensor::full(&[n], 5.0);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let mean = xt.mean();
            let var = xt
                .data()
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / n as f64;
            let a = s.alpha_bar[t];
            let want_mean = a.sqrt() * 5.0;
            assert!((mean - want_mean).abs() <= 0.05 * want_mean, "t={t}");
            assert!((var - (1.0 - a)).abs() <= 0.05 * (1.0 - a), "t={t}");
        }
    }
}
