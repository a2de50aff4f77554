//! Ornstein-Uhlenbeck process observed at 25 steps.

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const T_STEPS: usize = 25;
pub const DT: f64 = 0.2;
pub const Y0: f64 = 10.0;

/// `[-1, 1]^2 -> [0, 2] x [-2, 2]`.
pub fn to_physical(theta: &[f64]) -> Vec<f64> {
    vec![theta[0] + 1.0, 2.0 * theta[1]]
}

pub fn to_normalized(phys: &[f64]) -> Vec<f64> {
    vec![phys[0] - 1.0, phys[1] / 2.0]
}

/// Deterministic recursion for physical parameters and unit-free noise `w`
/// (already scaled to variance `DT`).
pub fn from_noise(phys: &[f64], w: &[f64]) -> Vec<f64> {
    let target = phys[1].exp();
    let mut y = Y0;
    w.iter()
        .map(|wi| {
            y += phys[0] * (target - y) * DT + 0.5 * wi;
            y
        })
        .collect()
}

pub fn simulate<R: Rng + ?Sized>(theta: &[f64], rng: &mut R) -> Vec<f64> {
    let n = Normal::new(0.0, DT.sqrt()).expect("valid");
    let w: Vec<f64> = (0..T_STEPS).map(|_| n.sample(rng)).collect();
    from_noise(&to_physical(theta), &w)
}
