//! Noise schedule, closed-form forward marginal, deterministic DDIM
//! updates and DDIM inversion.
//!
//! Timesteps run `0..=T`. Index 0 is the clean latent (`ᾱ_0 = 1`), so every
//! table except `betas` has `T + 1` entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the derived tables from `β_1 … β_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_1 … β_T`, stored at indices `0 … T-1`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.betas.iter().map(|b| 1.0 - b).collect()
    }

    /// `ᾱ_0 … ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside 0..={}", self.steps())))
    }

    /// Betas as a CVT1-ready tensor.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.betas.len()], self.betas.clone()).expect("non-empty schedule")
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        if t.rank() != 1 {
            return Err(Error::shape(format!(
                "schedule tensor must be rank 1, got {:?}",
                t.dims()
            )));
        }
        Self::from_betas(t.data().to_vec())
    }
}

/// Linearly spaced betas, endpoints included.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        let last = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / last)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampling_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.train_steps, self.beta_start, self.beta_end)
    }
}

/// Ordered `(t, t_prev)` pairs from `T` down to 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepPlan {
    pairs: Vec<(usize, usize)>,
}

impl StepPlan {
    /// `steps` evenly spaced jumps from `train_steps` to 0, rounding the
    /// intermediate timesteps to the nearest integer.
    pub fn uniform(train_steps: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > train_steps {
            return Err(Error::invalid(format!(
                "sampling steps must be in 1..={train_steps}, got {steps}"
            )));
        }
        let at = |k: usize| ((train_steps * k) as f64 / steps as f64).round() as usize;
        let pairs = (1..=steps).rev().map(|k| (at(k), at(k - 1))).collect();
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `sqrt(ᾱ_t)·z0 + sqrt(1−ᾱ_t)·noise`.
pub fn forward_marginal<T: Real>(
    z0: &Tensor<T>,
    t: usize,
    noise: &Tensor<T>,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let ab = s.alpha_bar(t)?;
    z0.lincomb(T::lit(ab.sqrt()), noise, T::lit((1.0 - ab).sqrt()))
}

/// Deterministic DDIM update from `t` down to `t_prev` (η = 0).
pub fn ddim_step<T: Real>(
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t <= t_prev {
        return Err(Error::invalid(format!(
            "DDIM step needs t > t_prev, got {t} -> {t_prev}"
        )));
    }
    transfer(z_t, eps, s.alpha_bar(t)?, s.alpha_bar(t_prev)?)
}

/// Inverse of [`ddim_step`] for a fixed noise prediction: moves from
/// `t_prev` up to `t`.
pub fn ddim_invert_step<T: Real>(
    z_prev: &Tensor<T>,
    eps: &Tensor<T>,
    t_prev: usize,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t <= t_prev {
        return Err(Error::invalid(format!(
            "inversion step needs t > t_prev, got {t_prev} -> {t}"
        )));
    }
    transfer(z_prev, eps, s.alpha_bar(t_prev)?, s.alpha_bar(t)?)
}

/// Re-noises the clean estimate implied by `(z, eps)` at level `ab_from`
/// to level `ab_to`.
fn transfer<T: Real>(z: &Tensor<T>, eps: &Tensor<T>, ab_from: f64, ab_to: f64) -> Result<Tensor<T>> {
    z.expect_same_dims(eps)?;
    // x0 = (z - sqrt(1-ab_from) eps) / sqrt(ab_from)
    // out = sqrt(ab_to) x0 + sqrt(1-ab_to) eps
    let ratio = (ab_to / ab_from).sqrt();
    let eps_coef = (1.0 - ab_to).sqrt() - ratio * (1.0 - ab_from).sqrt();
    z.lincomb(T::lit(ratio), eps, T::lit(eps_coef))
}

/// Runs the plan in reverse, mapping a clean latent to `z_T`. At each jump
/// `t_prev → t` the denoiser is queried at the destination timestep `t` with
/// the current latent.
pub fn ddim_invert<T, C, F>(
    z0: &Tensor<T>,
    mut denoiser: F,
    s: &NoiseSchedule,
    plan: &StepPlan,
    text: &C,
) -> Result<Tensor<T>>
where
    T: Real,
    C: ?Sized,
    F: FnMut(&Tensor<T>, usize, &C) -> Result<Tensor<T>>,
{
    let mut z = z0.clone();
    for &(t, t_prev) in plan.pairs().iter().rev() {
        let eps = denoiser(&z, t, text)?;
        z.expect_same_dims(&eps)
            .map_err(|e| Error::shape(format!("denoiser output during inversion: {e}")))?;
        z = ddim_invert_step(&z, &eps, t_prev, t, s)?;
    }
    Ok(z)
}

/// Runs the plan forward from `z_T` to a clean latent.
pub fn ddim_sample<T, C, F>(
    z_t: &Tensor<T>,
    mut denoiser: F,
    s: &NoiseSchedule,
    plan: &StepPlan,
    text: &C,
) -> Result<Tensor<T>>
where
    T: Real,
    C: ?Sized,
    F: FnMut(&Tensor<T>, usize, &C) -> Result<Tensor<T>>,
{
    let mut z = z_t.clone();
    for &(t, t_prev) in plan.pairs() {
        let eps = denoiser(&z, t, text)?;
        z.expect_same_dims(&eps)
            .map_err(|e| Error::shape(format!("denoiser output during sampling: {e}")))?;
        z = ddim_step(&z, &eps, t, t_prev, s)?;
    }
    Ok(z)
}
