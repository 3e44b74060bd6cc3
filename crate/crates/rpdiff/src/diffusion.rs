//! Variance schedules, the closed-form forward process, the denoising
//! training objective, and the deterministic DDIM sampler (eta = 0), including
//! partial trajectories between arbitrary cut points.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, NoisePredictor};
use crate::error::{Error, Result};
use crate::nn::GradientVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step noise variances and their cumulative products.
///
/// Arrays are indexed by `t - 1` for timesteps `1..=T`; `alpha_bar_at(0)` is
/// defined as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    horizon: u32,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    kind: ScheduleKind,
}

/// Build a schedule of `horizon` steps. The linear kind interpolates beta
/// between the two endpoints; the cosine kind derives beta from a squared
/// cosine cumulative-product curve, clamped into `(0, beta_end]`.
pub fn make_schedule(
    horizon: u32,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<VarianceSchedule> {
    if horizon < 2 {
        return Err(Error::InvalidConfig("horizon must be at least 2".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let t_count = horizon as usize;
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_count)
            .map(|i| {
                if t_count == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_count - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / horizon as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            (1..=t_count)
                .map(|t| {
                    let b = 1.0 - f(t as f64) / f((t - 1) as f64);
                    let _ = f0;
                    b.clamp(beta_start.min(1e-8), beta_end)
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut product = 1.0;
    for &a in &alpha {
        product *= a;
        alpha_bar.push(product);
    }
    let schedule = VarianceSchedule {
        horizon,
        beta,
        alpha,
        alpha_bar,
        kind,
    };
    schedule.check_invariants()?;
    Ok(schedule)
}

impl VarianceSchedule {
    fn check_invariants(&self) -> Result<()> {
        let mut prev = 1.0;
        for (i, (&b, &ab)) in self.beta.iter().zip(&self.alpha_bar).enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "beta_{} = {b} outside (0, 1)",
                    i + 1
                )));
            }
            if ab >= prev {
                return Err(Error::InvalidConfig(format!(
                    "alpha_bar not strictly decreasing at t = {}",
                    i + 1
                )));
            }
            prev = ab;
        }
        Ok(())
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Beta for timestep `t` in `1..=T`.
    pub fn beta(&self, t: u32) -> f64 {
        self.beta[(t - 1) as usize]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Cumulative product for `t` in `0..=T`, with `alpha_bar_at(0) = 1`.
    pub fn alpha_bar_at(&self, t: u32) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[(t - 1) as usize]
        }
    }

    /// Hash over the full beta table, used to tie artifacts to a schedule.
    pub fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(match self.kind {
            ScheduleKind::Linear => [0u8],
            ScheduleKind::Cosine => [1u8],
        });
        hasher.update(self.horizon.to_le_bytes());
        for b in &self.beta {
            hasher.update(b.to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Linear schedule with beta endpoints scaled to the horizon so the terminal
/// marginal is effectively `N(0, I)` (the 1e-4..0.02 convention belongs to a
/// 1000-step horizon).
pub fn default_schedule_for(horizon: u32) -> Result<VarianceSchedule> {
    let scale = 1000.0 / horizon as f64;
    make_schedule(
        horizon,
        (1e-4 * scale).min(0.5),
        (0.02 * scale).min(0.5),
        ScheduleKind::Linear,
    )
}

/// Exact closed-form diffusion of `x0` to timestep `t` with the given noise.
pub fn forward_diffuse(
    x0: &[f64],
    t: u32,
    eps: &[f64],
    schedule: &VarianceSchedule,
) -> Result<Vec<f64>> {
    if t < 1 || t > schedule.horizon() {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: 1,
            hi: schedule.horizon(),
        });
    }
    if eps.len() != x0.len() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            got: eps.len(),
            expected: x0.len(),
        });
    }
    let ab = schedule.alpha_bar_at(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| signal * x + noise * e)
        .collect())
}

/// Draw a standard-normal vector from the given stream.
pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Ordered latents along a (partial) diffusion or sampling path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    latents: Vec<(u32, Vec<f64>)>,
    direction: Direction,
    denoiser_calls: u64,
}

impl Trajectory {
    pub fn new(latents: Vec<(u32, Vec<f64>)>, direction: Direction, denoiser_calls: u64) -> Result<Self> {
        if latents.is_empty() {
            return Err(Error::InvalidConfig("empty trajectory".into()));
        }
        let dim = latents[0].1.len();
        for w in latents.windows(2) {
            let ok = match direction {
                Direction::Forward => w[0].0 < w[1].0,
                Direction::Reverse => w[0].0 > w[1].0,
            };
            if !ok {
                return Err(Error::InvalidConfig(
                    "trajectory timesteps not strictly monotone".into(),
                ));
            }
        }
        if latents.iter().any(|(_, x)| x.len() != dim) {
            return Err(Error::InvalidConfig(
                "trajectory latents have mixed dimensions".into(),
            ));
        }
        Ok(Self {
            latents,
            direction,
            denoiser_calls,
        })
    }

    pub fn latents(&self) -> &[(u32, Vec<f64>)] {
        &self.latents
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn denoiser_calls(&self) -> u64 {
        self.denoiser_calls
    }

    pub fn first(&self) -> &(u32, Vec<f64>) {
        &self.latents[0]
    }

    pub fn last(&self) -> &(u32, Vec<f64>) {
        self.latents.last().expect("trajectory is never empty")
    }
}

/// One deterministic DDIM update from `t` down to `t_next`.
///
/// Reconstructs `x0_hat = (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)` and
/// re-noises it to `t_next`; with `t_next = 0` the output is `x0_hat` itself.
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_t: &[f64],
    t: u32,
    t_next: u32,
    label: Option<u32>,
    schedule: &VarianceSchedule,
) -> Result<Vec<f64>> {
    if t_next >= t {
        return Err(Error::InvalidConfig(format!(
            "ddim_step requires t_next < t, got {t_next} >= {t}"
        )));
    }
    if t > schedule.horizon() {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: 1,
            hi: schedule.horizon(),
        });
    }
    let eps_hat = predictor.predict(x_t, t, label)?;
    let ab_t = schedule.alpha_bar_at(t);
    let ab_next = schedule.alpha_bar_at(t_next);
    let x0_scale = 1.0 / ab_t.sqrt();
    let eps_scale = (1.0 - ab_t).sqrt();
    let signal = ab_next.sqrt();
    let noise = (1.0 - ab_next).sqrt();
    Ok(x_t
        .iter()
        .zip(&eps_hat)
        .map(|(&x, &e)| {
            let x0_pred = (x - eps_scale * e) * x0_scale;
            signal * x0_pred + noise * e
        })
        .collect())
}

/// Integer timestep grid from `t_start` down to `t_end`, as evenly spaced as
/// integer rounding allows; `n_steps + 1` entries, strictly decreasing.
pub fn timestep_grid(t_start: u32, t_end: u32, n_steps: u32) -> Result<Vec<u32>> {
    if t_start <= t_end {
        return Err(Error::InvalidConfig(format!(
            "grid requires t_start > t_end, got {t_start} <= {t_end}"
        )));
    }
    if n_steps == 0 {
        return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
    }
    let span = (t_start - t_end) as u64;
    if n_steps as u64 > span {
        return Err(Error::InvalidConfig(format!(
            "{n_steps} steps cannot be strictly decreasing over a span of {span}"
        )));
    }
    let grid: Vec<u32> = (0..=n_steps as u64)
        .map(|i| {
            // round(i * span / n) in exact integer arithmetic
            let offset = (2 * i * span + n_steps as u64) / (2 * n_steps as u64);
            t_start - offset as u32
        })
        .collect();
    Ok(grid)
}

/// DDIM sampling from `t_start` down to `t_end` along an even integer grid.
/// The returned trajectory has `n_steps + 1` latents and reports exactly
/// `n_steps` denoiser invocations.
pub fn sample_partial<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_start: &[f64],
    t_start: u32,
    t_end: u32,
    n_steps: u32,
    label: Option<u32>,
    schedule: &VarianceSchedule,
) -> Result<Trajectory> {
    let grid = timestep_grid(t_start, t_end, n_steps)?;
    let mut latents = Vec::with_capacity(grid.len());
    latents.push((t_start, x_start.to_vec()));
    let mut x = x_start.to_vec();
    let mut calls = 0u64;
    for w in grid.windows(2) {
        x = ddim_step(predictor, &x, w[0], w[1], label, schedule)?;
        calls += 1;
        latents.push((w[1], x.clone()));
    }
    Trajectory::new(latents, Direction::Reverse, calls)
}

/// One sampled term of the denoising objective.
#[derive(Debug, Clone)]
pub struct DdpmLossSample {
    pub loss: f64,
    pub t: u32,
    pub eps: Vec<f64>,
}

/// Draw `(t, eps)` and evaluate `||eps - predict(forward_diffuse(x0, t, eps), t)||^2`.
/// The draws are exposed so runs can be reproduced.
pub fn ddpm_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    x0: &[f64],
    label: Option<u32>,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<DdpmLossSample> {
    let t = rng.random_range(1..=schedule.horizon());
    let eps = standard_normal(x0.len(), rng);
    let x_t = forward_diffuse(x0, t, &eps, schedule)?;
    let eps_hat = predictor.predict(&x_t, t, label)?;
    let loss = eps
        .iter()
        .zip(&eps_hat)
        .map(|(&e, &p)| (e - p) * (e - p))
        .sum();
    Ok(DdpmLossSample { loss, t, eps })
}

/// Same draw as [`ddpm_loss`] but also returns the gradient with respect to
/// the denoiser parameters.
pub fn ddpm_loss_gradient<R: Rng + ?Sized>(
    model: &Denoiser,
    x0: &[f64],
    label: Option<u32>,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<(DdpmLossSample, GradientVector)> {
    let t = rng.random_range(1..=schedule.horizon());
    let eps = standard_normal(x0.len(), rng);
    let x_t = forward_diffuse(x0, t, &eps, schedule)?;
    let (loss, grad) = model.noise_prediction_gradient(&x_t, t, label, &eps)?;
    Ok((DdpmLossSample { loss, t, eps }, grad))
}
