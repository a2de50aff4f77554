//! Two Moons: a noisy half-circle shifted by a parameter-dependent offset.

use rand::Rng;
use rand_distr::{Distribution, Normal};

const R_MEAN: f64 = 0.1;
const R_STD: f64 = 0.01;
const X_SHIFT: f64 = 0.25;

fn offset(theta: &[f64]) -> (f64, f64) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (-(theta[0] + theta[1]).abs() * s, (-theta[0] + theta[1]) * s)
}

/// Deterministic core: `x` for a given angle `a` and radius `r`.
pub fn from_noise(theta: &[f64], a: f64, r: f64) -> [f64; 2] {
    let (o1, o2) = offset(theta);
    [r * a.cos() + X_SHIFT + o1, r * a.sin() + o2]
}

pub fn simulate<R: Rng + ?Sized>(theta: &[f64], rng: &mut R) -> Vec<f64> {
    let a = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
    let r = Normal::new(R_MEAN, R_STD).expect("valid").sample(rng);
    from_noise(theta, a, r).to_vec()
}

fn log_radial(r: f64) -> f64 {
    let z = (r - R_MEAN) / R_STD;
    -0.5 * z * z - R_STD.ln() - 0.5 * crate::util::LN_2PI - std::f64::consts::PI.ln() - r.ln()
}

/// `log p(x | theta)` by change of variables from `(a, r)` to the plane:
/// `p = (1/pi) N(r | 0.1, 0.01^2) / r` on the right half-plane.
pub fn log_likelihood(theta: &[f64], x: &[f64]) -> f64 {
    let (o1, o2) = offset(theta);
    let u = x[0] - o1 - X_SHIFT;
    let v = x[1] - o2;
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    log_radial((u * u + v * v).sqrt())
}

/// Radius maximizing the planar density, root of `r^2 - 0.1 r + 0.01^2 = 0`.
pub fn mode_radius() -> f64 {
    0.5 * (R_MEAN + (R_MEAN * R_MEAN - 4.0 * R_STD * R_STD).sqrt())
}

/// Upper bound of the likelihood over `x` for any `theta`.
pub fn log_likelihood_bound() -> f64 {
    log_radial(mode_radius())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_noise() {
        assert_eq!(from_noise(&[0.0, 0.0], 0.0, 0.1), [0.35, 0.0]);
    }

    #[test]
    fn mode_dominates_radial_displacement() {
        let th = [0.2, -0.4];
        let x = from_noise(&th, 0.3, 0.1);
        let xd = from_noise(&th, 0.3, 0.15);
        assert!(log_likelihood(&th, &x) >= log_likelihood(&th, &xd));
        assert!(log_likelihood(&th, &x) <= log_likelihood_bound());
    }

    #[test]
    fn bound_is_the_maximum() {
        let b = log_likelihood_bound();
        for i in 0..2000 {
            let r = 0.05 + 0.1 * i as f64 / 2000.0;
            assert!(log_radial(r) <= b + 1e-12);
        }
    }
}
