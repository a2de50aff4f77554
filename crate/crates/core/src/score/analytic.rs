use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{check_batch, Condition, ScoreModel, ScorePullback};
use crate::error::{check_len, Error, Result};
use crate::schedule::{check_time, NoiseSchedule};
use crate::util::log_sum_exp;

/// Exact score of a diagonal Gaussian mixture convolved with the VE transition
/// kernel: `grad_z log sum_k pi_k N(z | m_k, S_k + sigma(t)^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticGmmScore {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
    schedule: NoiseSchedule,
}

impl AnalyticGmmScore {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        check_len(weights.len(), means.len(), "mixture means")?;
        check_len(weights.len(), variances.len(), "mixture variances")?;
        let dim = means[0].len();
        for (m, v) in means.iter().zip(&variances) {
            check_len(dim, m.len(), "component mean")?;
            check_len(dim, v.len(), "component variance")?;
            if v.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::Domain("component variances must be >= 0".into()));
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("mixture weights must lie on the simplex".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
            schedule,
        })
    }

    pub fn gaussian(mean: Vec<f64>, variance: Vec<f64>, schedule: NoiseSchedule) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance], schedule)
    }

    pub fn standard_normal(dim: usize, schedule: NoiseSchedule) -> Self {
        Self::gaussian(vec![0.0; dim], vec![1.0; dim], schedule).expect("valid standard normal")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    /// Log-density of the noised mixture at a single point.
    pub fn log_density(&self, z: &[f64], t: f64) -> f64 {
        let s2 = self.schedule.sigma(t).powi(2);
        let terms: Vec<f64> = (0..self.weights.len())
            .map(|k| self.weights[k].ln() + self.component_log_density(k, z, s2))
            .collect();
        log_sum_exp(&terms)
    }

    fn component_log_density(&self, k: usize, z: &[f64], s2: f64) -> f64 {
        let mut acc = 0.0;
        for ((zi, mi), vi) in z.iter().zip(&self.means[k]).zip(&self.variances[k]) {
            let var = vi + s2;
            let d = zi - mi;
            acc -= 0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln());
        }
        acc
    }

    /// Responsibilities and per-component scores at one point.
    fn components(&self, z: &[f64], s2: f64, resp: &mut [f64], comp_scores: &mut [Vec<f64>]) {
        let k_count = self.weights.len();
        for k in 0..k_count {
            resp[k] = self.weights[k].ln() + self.component_log_density(k, z, s2);
            for (i, g) in comp_scores[k].iter_mut().enumerate() {
                *g = -(z[i] - self.means[k][i]) / (self.variances[k][i] + s2);
            }
        }
        let lse = log_sum_exp(resp);
        for r in resp.iter_mut() {
            *r = (*r - lse).exp();
        }
    }

    fn check(&self, z: &ArrayView2<f64>, t: f64, cond: &Condition) -> Result<f64> {
        check_time(t)?;
        check_batch(z, self.dim(), "analytic score input")?;
        if !cond.is_empty() {
            return Err(Error::Unsupported(
                "analytic score models take no conditioning tokens".into(),
            ));
        }
        Ok(self.schedule.sigma(t).powi(2))
    }
}

struct AnalyticPullback {
    resp: Array2<f64>,
    comp_scores: Vec<Array2<f64>>,
    scores: Array2<f64>,
    variances: Vec<Vec<f64>>,
    s2: f64,
}

impl ScorePullback for AnalyticPullback {
    fn vjp(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_len(self.scores.nrows(), v.nrows(), "vjp batch")?;
        check_len(self.scores.ncols(), v.ncols(), "vjp cotangent")?;
        let (n, d) = v.dim();
        let mut out = Array2::zeros((n, d));
        // J = sum_k r_k (g_k g_k^T - D_k^{-1}) - s s^T, symmetric.
        for b in 0..n {
            let vb = v.row(b);
            let sb = self.scores.row(b);
            let s_dot_v: f64 = sb.iter().zip(vb.iter()).map(|(a, c)| a * c).sum();
            let mut row = out.row_mut(b);
            for (k, g) in self.comp_scores.iter().enumerate() {
                let r = self.resp[[b, k]];
                let gk = g.row(b);
                let g_dot_v: f64 = gk.iter().zip(vb.iter()).map(|(a, c)| a * c).sum();
                for i in 0..d {
                    row[i] += r * (gk[i] * g_dot_v - vb[i] / (self.variances[k][i] + self.s2));
                }
            }
            for i in 0..d {
                row[i] -= sb[i] * s_dot_v;
            }
        }
        Ok(out)
    }
}

impl ScoreModel for AnalyticGmmScore {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_dim(&self, cond: &Condition) -> Result<usize> {
        if cond.is_empty() {
            Ok(self.dim())
        } else {
            Err(Error::Unsupported(
                "analytic score models take no conditioning tokens".into(),
            ))
        }
    }

    fn score(&self, z: ArrayView2<f64>, t: f64, cond: &Condition) -> Result<Array2<f64>> {
        Ok(self.linearize(z, t, cond)?.0)
    }

    fn linearize<'a>(
        &'a self,
        z: ArrayView2<'a, f64>,
        t: f64,
        cond: &'a Condition,
    ) -> Result<(Array2<f64>, Box<dyn ScorePullback + 'a>)> {
        let s2 = self.check(&z, t, cond)?;
        let (n, d) = z.dim();
        let k_count = self.weights.len();
        let mut resp = Array2::zeros((n, k_count));
        let mut comp_scores = vec![Array2::zeros((n, d)); k_count];
        let mut scores = Array2::zeros((n, d));
        let mut r = vec![0.0; k_count];
        let mut g = vec![vec![0.0; d]; k_count];
        let mut zb = vec![0.0; d];
        for b in 0..n {
            zb.iter_mut().zip(z.row(b)).for_each(|(a, c)| *a = *c);
            self.components(&zb, s2, &mut r, &mut g);
            for k in 0..k_count {
                resp[[b, k]] = r[k];
                for i in 0..d {
                    comp_scores[k][[b, i]] = g[k][i];
                    scores[[b, i]] += r[k] * g[k][i];
                }
            }
        }
        let pullback = AnalyticPullback {
            resp,
            comp_scores,
            scores: scores.clone(),
            variances: self.variances.clone(),
            s2,
        };
        Ok((scores, Box::new(pullback)))
    }
}
