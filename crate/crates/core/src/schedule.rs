//! Variance-exploding noise schedule, reverse-time grids and the two
//! stochastic integrators shared by every sampler.
//!
//! The schedule is geometric, `sigma(t) = sigma_min * (sigma_max / sigma_min)^t`,
//! which gives `g(t)^2 = d sigma^2 / dt = 2 sigma(t) sigma_dot(t)`.
//!
//! Step sizes passed to the integrators are positive magnitudes `dt = t_j - t_{j-1}`
//! on the descending grid; the drift is written with a `+` sign so that a step
//! always moves toward the data distribution.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;
pub const DEFAULT_SIGMA_MAX: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
        }
    }
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::Domain(format!(
                "need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    #[inline]
    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// Unchecked `sigma(t)`; callers inside the crate validate `t` once per step.
    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_min * (t * self.log_ratio()).exp()
    }

    #[inline]
    pub fn sigma_dot(&self, t: f64) -> f64 {
        self.sigma(t) * self.log_ratio()
    }

    /// `(sigma(t), sigma_dot(t))` for `t` in `[0, 1]`.
    pub fn sigma_pair(&self, t: f64) -> Result<(f64, f64)> {
        check_time(t)?;
        let s = self.sigma(t);
        Ok((s, s * self.log_ratio()))
    }

    /// Diffusion coefficient in its closed form,
    /// `sigma_min (sigma_max/sigma_min)^t sqrt(2 ln(sigma_max/sigma_min))`.
    pub fn diffusion_coefficient(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t) * (2.0 * self.log_ratio()).sqrt()
    }

    /// `2 sigma(t) sigma_dot(t)`, the squared diffusion coefficient.
    #[inline]
    pub fn g_squared(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        2.0 * s * s * self.log_ratio()
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")))
    }
}

/// Descending reverse-time grid `t_N > ... > t_0`.
///
/// `times()[k] = (1 - k/N)^rho * (t_max - t_min) + t_min` for `k = 0..=N`, so
/// `times()[0] = t_max` and `times()[N] = t_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    n_steps: usize,
    rho: f64,
    t_min: f64,
    t_max: f64,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(n_steps: usize, rho: f64, t_min: f64, t_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Domain("time grid needs at least one step".into()));
        }
        if !(rho >= 1.0) {
            return Err(Error::Domain(format!("rho must be >= 1, got {rho}")));
        }
        if !(t_min >= 1e-12 && t_min < t_max && t_max <= 1.0) {
            return Err(Error::Domain(format!(
                "need 1e-12 <= t_min < t_max <= 1, got ({t_min}, {t_max})"
            )));
        }
        let n = n_steps as f64;
        let times = (0..=n_steps)
            .map(|k| {
                let u = 1.0 - k as f64 / n;
                u.powf(rho) * (t_max - t_min) + t_min
            })
            .collect();
        Ok(Self {
            n_steps,
            rho,
            t_min,
            t_max,
            times,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `(t, dt)` for reverse step `k` (0-based from `t_max`): the current time and
    /// the positive gap to the next, smaller time.
    pub fn step(&self, k: usize) -> (f64, f64) {
        let t = self.times[k];
        (t, t - self.times[k + 1])
    }
}

fn check_step(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("step size must be positive, got {dt}")))
    }
}

/// One Euler–Maruyama step of the reverse SDE, written into `z` in place.
pub fn euler_maruyama_step_in_place(
    z: &mut [f64],
    score: &[f64],
    schedule: &NoiseSchedule,
    t: f64,
    dt: f64,
    noise: &[f64],
) -> Result<()> {
    check_step(dt)?;
    check_time(t)?;
    check_len(z.len(), score.len(), "euler-maruyama score")?;
    check_len(z.len(), noise.len(), "euler-maruyama noise")?;
    let g2dt = schedule.g_squared(t) * dt;
    let diffusion = g2dt.sqrt();
    for ((zi, si), ni) in z.iter_mut().zip(score).zip(noise) {
        *zi += g2dt * si + diffusion * ni;
    }
    Ok(())
}

/// Returns `z + 2 sigma_dot sigma dt * score + sqrt(2 sigma_dot sigma dt) * noise`.
pub fn euler_maruyama_step(
    z: &[f64],
    score: &[f64],
    schedule: &NoiseSchedule,
    t: f64,
    dt: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let mut out = z.to_vec();
    euler_maruyama_step_in_place(&mut out, score, schedule, t, dt, noise)?;
    Ok(out)
}

/// Langevin step size `delta = eta * sigma_dot * sigma * dt / 2`.
pub fn langevin_delta(schedule: &NoiseSchedule, t: f64, dt: f64, eta: f64) -> f64 {
    eta * schedule.sigma_dot(t) * schedule.sigma(t) * dt / 2.0
}

pub fn langevin_step_in_place(
    z: &mut [f64],
    score: &[f64],
    schedule: &NoiseSchedule,
    t: f64,
    dt: f64,
    eta: f64,
    noise: &[f64],
) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::Domain(format!("eta must lie in (0, 1], got {eta}")));
    }
    check_step(dt)?;
    check_time(t)?;
    check_len(z.len(), score.len(), "langevin score")?;
    check_len(z.len(), noise.len(), "langevin noise")?;
    let delta = langevin_delta(schedule, t, dt, eta);
    let scale = (2.0 * delta).sqrt();
    for ((zi, si), ni) in z.iter_mut().zip(score).zip(noise) {
        *zi += delta * si + scale * ni;
    }
    Ok(())
}

/// Returns `z + delta * score + sqrt(2 delta) * noise`.
pub fn langevin_step(
    z: &[f64],
    score: &[f64],
    schedule: &NoiseSchedule,
    t: f64,
    dt: f64,
    eta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let mut out = z.to_vec();
    langevin_step_in_place(&mut out, score, schedule, t, dt, eta, noise)?;
    Ok(out)
}

/// Langevin update with an explicit step size, used where the caller has
/// already computed `delta` (tests and calibration).
pub fn langevin_step_with_delta(z: &[f64], score: &[f64], delta: f64, noise: &[f64]) -> Vec<f64> {
    let scale = (2.0 * delta).sqrt();
    z.iter()
        .zip(score)
        .zip(noise)
        .map(|((zi, si), ni)| zi + delta * si + scale * ni)
        .collect()
}
