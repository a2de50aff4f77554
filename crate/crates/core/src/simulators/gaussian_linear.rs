//! Gaussian Linear: `x ~ N(theta, 0.1 I)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const NOISE_VAR: f64 = 0.1;

pub fn from_noise(theta: &[f64], eps: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(eps)
        .map(|(t, e)| t + NOISE_VAR.sqrt() * e)
        .collect()
}

pub fn simulate<R: Rng + ?Sized>(theta: &[f64], rng: &mut R) -> Vec<f64> {
    let eps: Vec<f64> = theta.iter().map(|_| StandardNormal.sample(rng)).collect();
    from_noise(theta, &eps)
}

pub fn log_likelihood(theta: &[f64], x: &[f64]) -> f64 {
    let var = vec![NOISE_VAR; theta.len()];
    crate::util::log_normal_diag(x, theta, &var)
}
