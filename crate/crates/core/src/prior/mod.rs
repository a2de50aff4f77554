//! Parameter priors, prior ratios, ratio fitting, test-prior generation and
//! the coverage diagnostic.

mod fit;
mod generate;
mod ood;
mod ratio;

pub use fit::{fit_gmm_ratio, FitConfig, FitReport};
pub use generate::{generate_test_prior, mean_bounds, PriorFamily};
pub use ood::{ood_check, OodReport};
pub use ratio::{gaussian_ratio, ratio_exact, RatioGmm};

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{check_len, Error, Result};
use crate::util::{log_normal_diag, log_sum_exp};

const TRUNCATED_MAX_TRIES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    UniformBox {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    GaussianDiag {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
    /// `base` restricted to the box and renormalized.
    Truncated {
        base: Box<PriorSpec>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn check_box(lower: &[f64], upper: &[f64]) -> Result<()> {
    check_len(lower.len(), upper.len(), "box bounds")?;
    if lower.is_empty() {
        return Err(Error::Domain("prior needs at least one dimension".into()));
    }
    if lower.iter().zip(upper).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
        return Err(Error::Domain("box bounds need finite a_i < b_i".into()));
    }
    Ok(())
}

fn in_box(theta: &[f64], lower: &[f64], upper: &[f64]) -> bool {
    theta
        .iter()
        .zip(lower)
        .zip(upper)
        .all(|((x, a), b)| *x >= *a && *x <= *b)
}

impl PriorSpec {
    pub fn uniform(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let p = PriorSpec::UniformBox { lower, upper };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let p = PriorSpec::GaussianDiag { mean, std };
        p.validate()?;
        Ok(p)
    }

    pub fn gmm(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let p = PriorSpec::Gmm {
            weights,
            means,
            variances,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn truncated(base: PriorSpec, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let p = PriorSpec::Truncated {
            base: Box::new(base),
            lower,
            upper,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::UniformBox { lower, upper } => check_box(lower, upper),
            PriorSpec::GaussianDiag { mean, std } => {
                check_len(mean.len(), std.len(), "gaussian std")?;
                if mean.is_empty() {
                    return Err(Error::Domain("prior needs at least one dimension".into()));
                }
                if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return Err(Error::Domain("gaussian stds must be positive".into()));
                }
                Ok(())
            }
            PriorSpec::Gmm {
                weights,
                means,
                variances,
            } => {
                if weights.is_empty() {
                    return Err(Error::Domain("mixture needs a component".into()));
                }
                check_len(weights.len(), means.len(), "mixture means")?;
                check_len(weights.len(), variances.len(), "mixture variances")?;
                let d = means[0].len();
                if d == 0 {
                    return Err(Error::Domain("prior needs at least one dimension".into()));
                }
                for (m, v) in means.iter().zip(variances) {
                    check_len(d, m.len(), "mixture mean")?;
                    check_len(d, v.len(), "mixture variance")?;
                    if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                        return Err(Error::Domain("mixture variances must be positive".into()));
                    }
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain("mixture weights must lie on the simplex".into()));
                }
                Ok(())
            }
            PriorSpec::Truncated { base, lower, upper } => {
                base.validate()?;
                check_box(lower, upper)?;
                check_len(base.dim(), lower.len(), "truncation box")?;
                if matches!(**base, PriorSpec::Truncated { .. }) {
                    return Err(Error::Unsupported("nested truncation".into()));
                }
                if !(self.truncation_mass()? > 0.0) {
                    return Err(Error::Domain("truncation box holds no prior mass".into()));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::UniformBox { lower, .. } => lower.len(),
            PriorSpec::GaussianDiag { mean, .. } => mean.len(),
            PriorSpec::Gmm { means, .. } => means[0].len(),
            PriorSpec::Truncated { base, .. } => base.dim(),
        }
    }

    /// Mixture view: `(weights, means, variances)` for Gaussian kinds.
    pub fn components(&self) -> Option<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        match self {
            PriorSpec::GaussianDiag { mean, std } => Some((
                vec![1.0],
                vec![mean.clone()],
                vec![std.iter().map(|s| s * s).collect()],
            )),
            PriorSpec::Gmm {
                weights,
                means,
                variances,
            } => Some((weights.clone(), means.clone(), variances.clone())),
            _ => None,
        }
    }

    /// Support box if the prior is bounded.
    pub fn support(&self) -> Option<(&[f64], &[f64])> {
        match self {
            PriorSpec::UniformBox { lower, upper } | PriorSpec::Truncated { lower, upper, .. } => {
                Some((lower, upper))
            }
            _ => None,
        }
    }

    pub fn volume(&self) -> Option<f64> {
        self.support()
            .map(|(a, b)| a.iter().zip(b).map(|(a, b)| b - a).product())
    }

    /// Mass of `base` inside the truncation box; 1 for other kinds.
    pub(crate) fn truncation_mass(&self) -> Result<f64> {
        let PriorSpec::Truncated { base, lower, upper } = self else {
            return Ok(1.0);
        };
        let box_mass = |mean: &[f64], var: &[f64]| -> f64 {
            mean.iter()
                .zip(var)
                .zip(lower.iter().zip(upper))
                .map(|((m, v), (a, b))| {
                    let s = v.sqrt();
                    std_normal_cdf((b - m) / s) - std_normal_cdf((a - m) / s)
                })
                .product()
        };
        match base.as_ref() {
            PriorSpec::UniformBox {
                lower: la,
                upper: ua,
            } => Ok(la
                .iter()
                .zip(ua)
                .zip(lower.iter().zip(upper))
                .map(|((a, b), (c, d))| (b.min(*d) - a.max(*c)).max(0.0) / (b - a))
                .product()),
            other => {
                let (w, m, v) = other.components().expect("gaussian kinds");
                Ok(w.iter()
                    .zip(m.iter().zip(&v))
                    .map(|(w, (m, v))| w * box_mass(m, v))
                    .sum())
            }
        }
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.dim(), theta.len(), "prior density input")?;
        Ok(match self {
            PriorSpec::UniformBox { lower, upper } => {
                if in_box(theta, lower, upper) {
                    -lower.iter().zip(upper).map(|(a, b)| (b - a).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorSpec::GaussianDiag { mean, std } => {
                let var: Vec<f64> = std.iter().map(|s| s * s).collect();
                log_normal_diag(theta, mean, &var)
            }
            PriorSpec::Gmm {
                weights,
                means,
                variances,
            } => {
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means.iter().zip(variances))
                    .map(|(w, (m, v))| w.ln() + log_normal_diag(theta, m, v))
                    .collect();
                log_sum_exp(&terms)
            }
            PriorSpec::Truncated { base, lower, upper } => {
                if in_box(theta, lower, upper) {
                    base.log_density(theta)? - self.truncation_mass()?.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        })
    }

    pub fn density(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.log_density(theta)?.exp())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        Ok(match self {
            PriorSpec::UniformBox { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                .collect(),
            PriorSpec::GaussianDiag { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(m, s)| m + s * { let e: f64 = StandardNormal.sample(rng); e })
                .collect::<Vec<f64>>(),
            PriorSpec::Gmm {
                weights,
                means,
                variances,
            } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                means[k]
                    .iter()
                    .zip(&variances[k])
                    .map(|(m, v)| m + v.sqrt() * { let e: f64 = StandardNormal.sample(rng); e })
                    .collect::<Vec<f64>>()
            }
            PriorSpec::Truncated { base, lower, upper } => {
                for _ in 0..TRUNCATED_MAX_TRIES {
                    let th = base.sample(rng)?;
                    if in_box(&th, lower, upper) {
                        return Ok(th);
                    }
                }
                return Err(Error::Exhausted {
                    proposals: TRUNCATED_MAX_TRIES,
                });
            }
        })
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Vec<f64>>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Per-dimension mean and standard deviation.
    pub fn moments(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            PriorSpec::UniformBox { lower, upper } => Ok((
                lower.iter().zip(upper).map(|(a, b)| 0.5 * (a + b)).collect(),
                lower
                    .iter()
                    .zip(upper)
                    .map(|(a, b)| (b - a) / 12f64.sqrt())
                    .collect(),
            )),
            PriorSpec::GaussianDiag { mean, std } => Ok((mean.clone(), std.clone())),
            PriorSpec::Gmm {
                weights,
                means,
                variances,
            } => {
                let d = means[0].len();
                let mut m = vec![0.0; d];
                let mut second = vec![0.0; d];
                for (w, (mu, v)) in weights.iter().zip(means.iter().zip(variances)) {
                    for i in 0..d {
                        m[i] += w * mu[i];
                        second[i] += w * (v[i] + mu[i] * mu[i]);
                    }
                }
                let s = (0..d).map(|i| (second[i] - m[i] * m[i]).max(0.0).sqrt()).collect();
                Ok((m, s))
            }
            PriorSpec::Truncated { .. } => Err(Error::Unsupported(
                "closed-form moments of truncated priors".into(),
            )),
        }
    }

    /// Applies the affine map `theta -> m + s * u` in reverse: the density of
    /// `u` when `theta` follows this prior.
    pub fn pull_back(&self, m: &[f64], s: &[f64]) -> Result<PriorSpec> {
        check_len(self.dim(), m.len(), "affine shift")?;
        check_len(self.dim(), s.len(), "affine scale")?;
        let fwd = |x: &[f64]| -> Vec<f64> {
            x.iter().zip(m).zip(s).map(|((x, m), s)| (x - m) / s).collect()
        };
        let scale_var = |v: &[f64]| -> Vec<f64> { v.iter().zip(s).map(|(v, s)| v / (s * s)).collect() };
        Ok(match self {
            PriorSpec::UniformBox { lower, upper } => PriorSpec::UniformBox {
                lower: fwd(lower),
                upper: fwd(upper),
            },
            PriorSpec::GaussianDiag { mean, std } => PriorSpec::GaussianDiag {
                mean: fwd(mean),
                std: std.iter().zip(s).map(|(a, s)| a / s).collect(),
            },
            PriorSpec::Gmm {
                weights,
                means,
                variances,
            } => PriorSpec::Gmm {
                weights: weights.clone(),
                means: means.iter().map(|mu| fwd(mu)).collect(),
                variances: variances.iter().map(|v| scale_var(v)).collect(),
            },
            PriorSpec::Truncated { base, lower, upper } => PriorSpec::Truncated {
                base: Box::new(base.pull_back(m, s)?),
                lower: fwd(lower),
                upper: fwd(upper),
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: PriorSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn uniform_density_and_support() {
        let p = PriorSpec::uniform(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!((p.density(&[0.3, -0.2]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(p.density(&[1.5, 0.0]).unwrap(), 0.0);
        assert!(PriorSpec::uniform(vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn truncated_gaussian_normalizes() {
        let base = PriorSpec::gaussian(vec![0.0], vec![1.0]).unwrap();
        let t = PriorSpec::truncated(base, vec![0.0], vec![10.0]).unwrap();
        // Half-normal density at 0 is 2 * phi(0).
        let want = 2.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((t.density(&[0.0]).unwrap() - want).abs() < 1e-12);
        assert_eq!(t.density(&[-0.1]).unwrap(), 0.0);
        let n = 4000;
        let h = 20.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| t.density(&[-5.0 + (i as f64 + 0.5) * h]).unwrap() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gmm_moments_and_sampling() {
        let p = PriorSpec::gmm(
            vec![0.25, 0.75],
            vec![vec![-1.0], vec![1.0]],
            vec![vec![0.5], vec![0.5]],
        )
        .unwrap();
        let (m, s) = p.moments().unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15);
        assert!((s[0] * s[0] - (0.5 + 1.0 - 0.25)).abs() < 1e-12);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let xs = p.sample_n(&mut rng, 20_000).unwrap();
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        assert!((mean - 0.5).abs() < 0.03);
    }

    #[test]
    fn json_round_trip() {
        let p = PriorSpec::truncated(
            PriorSpec::gmm(
                vec![0.3, 0.7],
                vec![vec![0.1, 0.2], vec![-0.3, 0.4]],
                vec![vec![0.01, 0.02], vec![0.03, 0.04]],
            )
            .unwrap(),
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: PriorSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn pull_back_is_a_change_of_variables() {
        let p = PriorSpec::gaussian(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let (m, s) = (vec![0.5, 1.0], vec![2.0, 4.0]);
        let u = p.pull_back(&m, &s).unwrap();
        let uu = [0.3, -0.4];
        let th: Vec<f64> = uu.iter().zip(&m).zip(&s).map(|((u, m), s)| m + s * u).collect();
        let jac: f64 = s.iter().product::<f64>().ln();
        let lhs = u.log_density(&uu).unwrap();
        let rhs = p.log_density(&th).unwrap() + jac;
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
