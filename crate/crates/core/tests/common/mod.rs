#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use priorguide::schedule::NoiseSchedule;
use priorguide::score::{Condition, ScoreModel, ScorePullback};
use priorguide::Result;

pub fn t_for_sigma(s: &NoiseSchedule, sigma: f64) -> f64 {
    (sigma / s.sigma_min()).ln() / (s.sigma_max() / s.sigma_min()).ln()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

pub fn col_mean(a: ArrayView2<f64>, j: usize) -> f64 {
    a.column(j).mean().unwrap()
}

pub fn col_var(a: ArrayView2<f64>, j: usize) -> f64 {
    a.column(j).var(1.0)
}

pub fn gaussian_rows<R: rand::Rng>(rng: &mut R, n: usize, mean: &[f64], std: &[f64]) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn((n, mean.len()), |(_, j)| {
        let e: f64 = StandardNormal.sample(rng);
        mean[j] + std[j] * e
    })
}

/// Zero-mean Gaussian with a full 2x2 covariance, noised by the schedule.
/// Scores are `-(S + sigma^2 I)^{-1} z`; used where the diagonal analytic
/// model cannot express correlations.
pub struct Gaussian2 {
    pub cov: [[f64; 2]; 2],
    pub schedule: NoiseSchedule,
}

impl Gaussian2 {
    pub fn precision(&self, t: f64) -> [[f64; 2]; 2] {
        let s2 = self.schedule.sigma(t).powi(2);
        let (a, b, d) = (self.cov[0][0] + s2, self.cov[0][1], self.cov[1][1] + s2);
        let det = a * d - b * b;
        [[d / det, -b / det], [-b / det, a / det]]
    }
}

struct Pullback([[f64; 2]; 2]);

impl ScorePullback for Pullback {
    fn vjp(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        let p = self.0;
        Ok(Array2::from_shape_fn((v.nrows(), 2), |(b, j)| {
            -(v[[b, 0]] * p[0][j] + v[[b, 1]] * p[1][j])
        }))
    }
}

impl ScoreModel for Gaussian2 {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_dim(&self, _cond: &Condition) -> Result<usize> {
        Ok(2)
    }

    fn score(&self, z: ArrayView2<f64>, t: f64, _cond: &Condition) -> Result<Array2<f64>> {
        let p = self.precision(t);
        Ok(Array2::from_shape_fn((z.nrows(), 2), |(b, i)| {
            -(p[i][0] * z[[b, 0]] + p[i][1] * z[[b, 1]])
        }))
    }

    fn linearize<'a>(
        &'a self,
        z: ArrayView2<'a, f64>,
        t: f64,
        cond: &'a Condition,
    ) -> Result<(Array2<f64>, Box<dyn ScorePullback + 'a>)> {
        Ok((self.score(z, t, cond)?, Box::new(Pullback(self.precision(t)))))
    }
}

/// `log sum_i w_i N(mu_i | mu_{0|t}(z)[theta], Sigma_i + c(t) I)` evaluated
/// from the model's score at a single point.
pub fn log_guidance_mixture<M: ScoreModel + ?Sized>(
    model: &M,
    ratio: &priorguide::prior::RatioGmm,
    z: &[f64],
    t: f64,
    cond: &Condition,
    theta_index: &[usize],
) -> f64 {
    let zz = ndarray::Array2::from_shape_vec((1, z.len()), z.to_vec()).unwrap();
    let s = model.score(zz.view(), t, cond).unwrap();
    let s2 = model.schedule().sigma(t).powi(2);
    let c = s2 / (1.0 + s2);
    let mu: Vec<f64> = theta_index.iter().map(|&i| z[i] + s2 * s[[0, i]]).collect();
    let (w, m, v) = (&ratio.weights, &ratio.means, &ratio.variances);
    let terms: Vec<f64> = (0..w.len())
        .map(|k| {
            let mut acc = w[k].ln();
            for j in 0..mu.len() {
                let var = v[k][j] + c;
                acc -= 0.5 * ((m[k][j] - mu[j]).powi(2) / var + (std::f64::consts::TAU * var).ln());
            }
            acc
        })
        .collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// Central differences of `f` in every coordinate of `z`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let mut a = z.to_vec();
            let mut b = z.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}
