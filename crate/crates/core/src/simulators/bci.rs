//! Bayesian causal inference observer in an audiovisual localization task.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const RHO_A: f64 = 4.0 / 3.0;
pub const LAPSE: f64 = 0.02;
pub const MU_P: f64 = 0.0;
pub const LAPSE_RANGE: f64 = 45.0;
pub const GRID: [f64; 7] = [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0];
pub const N_TRIALS: usize = 98;

/// Centre and scale of the physical prior over
/// `(log sigma_V, log sigma_A, log sigma_s, log sigma_m, logit p_same)`.
pub fn physical_loc_scale() -> ([f64; 5], [f64; 5]) {
    (
        [2f64.ln(), 2f64.ln(), 5f64.ln(), 0.3f64.ln(), 0.0],
        [0.35, 0.35, 0.5, 0.35, 1.0],
    )
}

pub fn to_physical(theta: &[f64]) -> Vec<f64> {
    let (m, s) = physical_loc_scale();
    (0..5).map(|i| m[i] + s[i] * theta[i]).collect()
}

pub fn to_normalized(phys: &[f64]) -> Vec<f64> {
    let (m, s) = physical_loc_scale();
    (0..5).map(|i| (phys[i] - m[i]) / s[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Report {
    Visual,
    Auditory,
}

/// Trial `i`: the first 49 are visual reports, the last 49 auditory, each
/// over the grid with `S_V` in the outer loop.
pub fn design(i: usize) -> (f64, f64, Report) {
    let report = if i < 49 { Report::Visual } else { Report::Auditory };
    let j = i % 49;
    (GRID[j / 7], GRID[j % 7], report)
}

#[derive(Debug, Clone, Copy)]
pub struct Observer {
    pub sigma_v: f64,
    pub sigma_a: f64,
    pub sigma_s: f64,
    pub sigma_m: f64,
    pub p_same: f64,
}

impl Observer {
    pub fn from_physical(phys: &[f64]) -> Self {
        Self {
            sigma_v: phys[0].exp(),
            sigma_a: phys[1].exp(),
            sigma_s: phys[2].exp(),
            sigma_m: phys[3].exp(),
            p_same: 1.0 / (1.0 + (-phys[4]).exp()),
        }
    }

    /// `P(C = 1 | x_V, x_A)`.
    pub fn posterior_common(&self, xv: f64, xa: f64) -> f64 {
        let (vv, va, vs) = (self.sigma_v.powi(2), self.sigma_a.powi(2), self.sigma_s.powi(2));
        let det = vv * va + vv * vs + va * vs;
        let log_l1 = -((xv - xa).powi(2) * vs + (xv - MU_P).powi(2) * va + (xa - MU_P).powi(2) * vv)
            / (2.0 * det)
            - (2.0 * std::f64::consts::PI).ln()
            - 0.5 * det.ln();
        let log_l2 = -(xv - MU_P).powi(2) / (2.0 * (vv + vs)) - (xa - MU_P).powi(2) / (2.0 * (va + vs))
            - (2.0 * std::f64::consts::PI).ln()
            - 0.5 * ((vv + vs) * (va + vs)).ln();
        let a = self.p_same.ln() + log_l1;
        let b = (1.0 - self.p_same).ln() + log_l2;
        if a == f64::NEG_INFINITY {
            return 0.0;
        }
        1.0 / (1.0 + (b - a).exp())
    }

    /// Precision-weighted fusion of both cues with the spatial prior.
    pub fn mu_common(&self, xv: f64, xa: f64) -> f64 {
        let (pv, pa, ps) = (self.sigma_v.powi(-2), self.sigma_a.powi(-2), self.sigma_s.powi(-2));
        (xv * pv + xa * pa + MU_P * ps) / (pv + pa + ps)
    }

    /// Single-cue estimate for the reported modality.
    pub fn mu_separate(&self, xv: f64, xa: f64, report: Report) -> f64 {
        let ps = self.sigma_s.powi(-2);
        let (x, p) = match report {
            Report::Visual => (xv, self.sigma_v.powi(-2)),
            Report::Auditory => (xa, self.sigma_a.powi(-2)),
        };
        (x * p + MU_P * ps) / (p + ps)
    }

    pub fn estimate(&self, xv: f64, xa: f64, report: Report) -> f64 {
        let pc = self.posterior_common(xv, xa);
        pc * self.mu_common(xv, xa) + (1.0 - pc) * self.mu_separate(xv, xa, report)
    }
}

/// Per-trial noise: standard normals for the two measurements and the motor
/// response, and the lapse outcome (`Some(u)` with `u` in `[0, 1)`).
#[derive(Debug, Clone, Copy, Default)]
pub struct TrialNoise {
    pub eps_v: f64,
    pub eps_a: f64,
    pub eps_m: f64,
    pub lapse: Option<f64>,
}

pub fn trial_response(obs: &Observer, trial: usize, noise: &TrialNoise) -> f64 {
    if let Some(u) = noise.lapse {
        return -LAPSE_RANGE + 2.0 * LAPSE_RANGE * u;
    }
    let (sv, sa, report) = design(trial);
    let xv = sv + obs.sigma_v * noise.eps_v;
    let xa = RHO_A * sa + obs.sigma_a * noise.eps_a;
    obs.estimate(xv, xa, report) + obs.sigma_m * noise.eps_m
}

pub fn simulate<R: Rng + ?Sized>(theta: &[f64], rng: &mut R) -> Vec<f64> {
    let obs = Observer::from_physical(&to_physical(theta));
    (0..N_TRIALS)
        .map(|i| {
            let noise = TrialNoise {
                eps_v: StandardNormal.sample(rng),
                eps_a: StandardNormal.sample(rng),
                eps_m: StandardNormal.sample(rng),
                lapse: (rng.random::<f64>() < LAPSE).then(|| rng.random::<f64>()),
            };
            trial_response(&obs, i, &noise)
        })
        .collect()
}
