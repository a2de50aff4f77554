//! Turin radio propagation model: 101 log-power samples of the impulse response.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

pub const BANDWIDTH: f64 = 0.5e9;
pub const N_S: usize = 101;
/// Delay window `[0, (N_s - 1) / B]`.
pub const TAU_MAX: f64 = (N_S - 1) as f64 / BANDWIDTH;

/// Bounds of `(G0, T, lambda0, sigma_N^2)`.
pub const LOWER: [f64; 4] = [1e-9, 1e-9, 1e7, 1e-10];
pub const UPPER: [f64; 4] = [1e-8, 1e-8, 5e9, 1e-9];

pub fn to_physical(theta: &[f64]) -> Vec<f64> {
    (0..4).map(|i| LOWER[i] + (UPPER[i] - LOWER[i]) * theta[i]).collect()
}

pub fn to_normalized(phys: &[f64]) -> Vec<f64> {
    (0..4).map(|i| (phys[i] - LOWER[i]) / (UPPER[i] - LOWER[i])).collect()
}

fn delta_f() -> f64 {
    BANDWIDTH / (N_S - 1) as f64
}

/// Deterministic core from the spectrum `Y_k`: inverse DFT at `t_n = n / B`,
/// then `10 log10 |y~|^2`.
pub fn from_spectrum(y: &[Complex64]) -> Vec<f64> {
    let df = delta_f();
    (0..N_S)
        .map(|n| {
            let t = n as f64 / BANDWIDTH;
            let acc: Complex64 = y
                .iter()
                .enumerate()
                .map(|(k, yk)| yk * Complex64::cis(2.0 * std::f64::consts::PI * k as f64 * df * t))
                .sum();
            10.0 * (acc / N_S as f64).norm_sqr().log10()
        })
        .collect()
}

/// `Y_k = sum_l alpha_l exp(-j 2 pi df k tau_l) + W_k`.
pub fn spectrum(delays: &[f64], gains: &[Complex64], noise: &[Complex64]) -> Vec<Complex64> {
    let df = delta_f();
    (0..N_S)
        .map(|k| {
            let h: Complex64 = delays
                .iter()
                .zip(gains)
                .map(|(tau, a)| a * Complex64::cis(-2.0 * std::f64::consts::PI * df * k as f64 * tau))
                .sum();
            h + noise[k]
        })
        .collect()
}

fn complex_normal<R: Rng + ?Sized>(var: f64, rng: &mut R) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Draws the arrival delays for physical rate `lambda0`.
pub fn draw_delays<R: Rng + ?Sized>(lambda0: f64, rng: &mut R) -> Vec<f64> {
    let n = Poisson::new(lambda0 * TAU_MAX).expect("positive rate").sample(rng) as usize;
    (0..n).map(|_| rng.random::<f64>() * TAU_MAX).collect()
}

pub fn simulate<R: Rng + ?Sized>(theta: &[f64], rng: &mut R) -> Vec<f64> {
    let p = to_physical(theta);
    let (g0, t_rev, lambda0, noise_var) = (p[0], p[1], p[2], p[3]);
    let delays = draw_delays(lambda0, rng);
    let gains: Vec<Complex64> = delays
        .iter()
        .map(|tau| complex_normal(g0 * (-tau / t_rev).exp() / lambda0, rng))
        .collect();
    let noise: Vec<Complex64> = (0..N_S).map(|_| complex_normal(noise_var, rng)).collect();
    from_spectrum(&spectrum(&delays, &gains, &noise))
}
