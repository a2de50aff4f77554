//! Small numeric helpers shared across modules.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log sum exp(x)`, returning `-inf` for empty input or all `-inf` entries.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into probabilities in place and returns the
/// log normalizer.
pub fn softmax_in_place(x: &mut [f64]) -> f64 {
    let lse = log_sum_exp(x);
    for v in x.iter_mut() {
        *v = (*v - lse).exp();
    }
    lse
}

/// Log-density of a diagonal Gaussian.
pub fn log_normal_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        let d = xi - mi;
        acc -= 0.5 * (d * d / vi + LN_2PI + vi.ln());
    }
    acc
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Independent deterministic stream `stream` derived from `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha20Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Column means and (population) standard deviations of row-major samples.
pub fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= n);
    let mut s = vec![0.0; d];
    for r in rows {
        for ((a, b), c) in s.iter_mut().zip(r).zip(&m) {
            *a += (b - c) * (b - c);
        }
    }
    s.iter_mut().for_each(|a| *a = (*a / n).sqrt());
    (m, s)
}
