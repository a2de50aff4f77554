//! Reference posteriors: conjugate updates for Gaussian-linear models,
//! rejection sampling and sampling-importance-resampling.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::prior::PriorSpec;
use crate::sampler::SampleSet;
use crate::util::{log_normal_diag, rng_stream, softmax_in_place};

/// Default proposal budget for rejection sampling.
pub const DEFAULT_MAX_PROPOSALS: usize = 2_000_000;
/// SIR is reported reliable at or above this ESS fraction.
pub const MIN_RELIABLE_ESS: f64 = 0.01;

/// Diagonal-Gaussian mixture posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugatePosterior {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl ConjugatePosterior {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn to_prior(&self) -> Result<PriorSpec> {
        PriorSpec::gmm(self.weights.clone(), self.means.clone(), self.variances.clone())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m.iter_mut().zip(mu).for_each(|(a, b)| *a += w * b);
        }
        m
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w.ln() + log_normal_diag(theta, m, v))
            .collect();
        crate::util::log_sum_exp(&terms)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<SampleSet> {
        let rows = self.to_prior()?.sample_n(rng, n)?;
        Ok(rows_to_set(&rows, self.dim()))
    }
}

/// Posterior of `theta` given `x ~ N(theta, noise_var I)` under a diagonal
/// Gaussian or mixture prior.
pub fn gaussian_linear_posterior(prior: &PriorSpec, x: &[f64], noise_var: f64) -> Result<ConjugatePosterior> {
    check_len(prior.dim(), x.len(), "observation")?;
    if !(noise_var > 0.0) {
        return Err(Error::Domain("noise variance must be positive".into()));
    }
    let (w, m, v) = match prior {
        PriorSpec::GaussianDiag { .. } | PriorSpec::Gmm { .. } => prior.components().expect("gaussian kinds"),
        _ => return Err(Error::Unsupported("conjugate posterior needs a Gaussian or mixture prior".into())),
    };
    let d = x.len();
    let mut log_w = Vec::with_capacity(w.len());
    let (mut means, mut vars) = (Vec::new(), Vec::new());
    for k in 0..w.len() {
        let marg: Vec<f64> = v[k].iter().map(|vk| vk + noise_var).collect();
        log_w.push(w[k].ln() + log_normal_diag(x, &m[k], &marg));
        means.push(
            (0..d)
                .map(|i| (m[k][i] * noise_var + x[i] * v[k][i]) / marg[i])
                .collect(),
        );
        vars.push((0..d).map(|i| v[k][i] * noise_var / marg[i]).collect());
    }
    softmax_in_place(&mut log_w);
    Ok(ConjugatePosterior {
        weights: log_w,
        means,
        variances: vars,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub accepted: usize,
    pub proposals: usize,
    pub acceptance_rate: f64,
}

fn rows_to_set(rows: &[Vec<f64>], d: usize) -> SampleSet {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    SampleSet {
        samples: Array2::from_shape_vec((rows.len(), d), flat).expect("rows have dimension d"),
        nfe: 0,
        meta: Default::default(),
    }
}

/// Rejection sampling from `q(theta) exp(loglik(theta))` with proposal `q`.
/// Stops at `n_target` acceptances or `max_proposals` draws; fewer than
/// `n_target` is returned as is, zero is an error.
pub fn rejection_sample<F, R>(
    loglik: F,
    q: &PriorSpec,
    log_m: f64,
    n_target: usize,
    max_proposals: usize,
    rng: &mut R,
) -> Result<(SampleSet, RejectionReport)>
where
    F: Fn(&[f64]) -> f64 + Sync,
    R: Rng + ?Sized,
{
    const CHUNK: usize = 4096;
    if n_target == 0 || max_proposals == 0 {
        return Err(Error::Domain("rejection sampling needs positive target and budget".into()));
    }
    let d = q.dim();
    let seed: u64 = rng.random();
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut proposals = 0;
    let mut block = 0u64;
    while accepted.len() < n_target && proposals < max_proposals {
        let n_chunks = rayon::current_num_threads().max(1);
        let results: Vec<Result<Vec<(usize, Vec<f64>)>>> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let mut r = rng_stream(seed, block + c as u64);
                let mut out = Vec::new();
                for j in 0..CHUNK {
                    let th = q.sample(&mut r)?;
                    let u: f64 = r.random();
                    if u.ln() < loglik(&th) - log_m {
                        out.push((j, th));
                    }
                }
                Ok(out)
            })
            .collect();
        block += n_chunks as u64;
        let end = (proposals + n_chunks * CHUNK).min(max_proposals);
        'merge: for (c, res) in results.into_iter().enumerate() {
            for (j, th) in res? {
                let g = proposals + c * CHUNK + j;
                if g >= end {
                    break 'merge;
                }
                accepted.push(th);
                if accepted.len() == n_target {
                    proposals = g;
                    break 'merge;
                }
            }
        }
        proposals = if accepted.len() == n_target { proposals + 1 } else { end };
    }
    if accepted.is_empty() {
        return Err(Error::Exhausted { proposals });
    }
    let report = RejectionReport {
        accepted: accepted.len(),
        proposals,
        acceptance_rate: accepted.len() as f64 / proposals as f64,
    };
    let set = rows_to_set(&accepted, d)
        .with_meta("method", "rejection")
        .with_meta("acceptance_rate", report.acceptance_rate)
        .with_meta("proposals", report.proposals);
    Ok((set, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirReport {
    /// `(sum w)^2 / sum w^2` divided by the number of proposals.
    pub ess_fraction: f64,
    pub reliable: bool,
}

/// `(sum w)^2 / (n sum w^2)` from log-weights; scale invariant.
pub fn ess_fraction(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(Error::DegenerateWeights("no weights".into()));
    }
    if log_w.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::Domain("log-weights must be finite or -inf".into()));
    }
    let mut w = log_w.to_vec();
    let lse = softmax_in_place(&mut w);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights("all weights are zero".into()));
    }
    let s2: f64 = w.iter().map(|x| x * x).sum();
    Ok(1.0 / (s2 * log_w.len() as f64))
}

/// Multinomial resampling of `samples` by normalized `exp(log_w)`.
pub fn sir_resample<R: Rng + ?Sized>(
    samples: &[Vec<f64>],
    log_w: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Result<(SampleSet, SirReport)> {
    check_len(samples.len(), log_w.len(), "importance weights")?;
    let ess = ess_fraction(log_w)?;
    let mut w = log_w.to_vec();
    softmax_in_place(&mut w);
    let idx = WeightedIndex::new(&w).map_err(|e| Error::DegenerateWeights(e.to_string()))?;
    let rows: Vec<Vec<f64>> = (0..n_out).map(|_| samples[idx.sample(rng)].clone()).collect();
    let report = SirReport {
        ess_fraction: ess,
        reliable: ess >= MIN_RELIABLE_ESS,
    };
    let d = samples.first().map_or(0, Vec::len);
    let set = rows_to_set(&rows, d)
        .with_meta("method", "sir")
        .with_meta("ess_fraction", ess);
    Ok((set, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn equal_precision_update_halves() {
        let s = 0.1f64.sqrt();
        let p = PriorSpec::gaussian(vec![0.0; 3], vec![s; 3]).unwrap();
        let x = [0.4, -0.2, 1.0];
        let post = gaussian_linear_posterior(&p, &x, 0.1).unwrap();
        for i in 0..3 {
            assert!((post.means[0][i] - x[i] / 2.0).abs() < 1e-15);
            assert!((post.variances[0][i] - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_prior_limit() {
        let p = PriorSpec::gaussian(vec![0.0], vec![1e6]).unwrap();
        let post = gaussian_linear_posterior(&p, &[0.7], 0.1).unwrap();
        assert!((post.means[0][0] - 0.7).abs() < 1e-9);
        assert!((post.variances[0][0] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn distant_component_loses_weight() {
        // Component 1 sits 10 marginal standard deviations from x.
        let sd = (0.1f64 + 0.1).sqrt();
        let p = PriorSpec::gmm(
            vec![0.5, 0.5],
            vec![vec![0.0], vec![10.0 * sd]],
            vec![vec![0.1], vec![0.1]],
        )
        .unwrap();
        let post = gaussian_linear_posterior(&p, &[0.0], 0.1).unwrap();
        assert!(post.weights[1] < 1e-4);
        assert!((post.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_prior_is_unsupported() {
        let p = PriorSpec::uniform(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(gaussian_linear_posterior(&p, &[0.5], 0.1), Err(Error::Unsupported(_))));
    }

    #[test]
    fn constant_likelihood_accepts_everything() {
        let q = PriorSpec::gaussian(vec![0.0], vec![1.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let (s, rep) = rejection_sample(|_| 0.0, &q, 0.0, 1000, 100_000, &mut rng).unwrap();
        assert_eq!(s.samples.nrows(), 1000);
        assert_eq!(rep.proposals, 1000);
        assert_eq!(rep.accepted, 1000);
    }

    #[test]
    fn zero_acceptance_is_exhaustion() {
        let q = PriorSpec::gaussian(vec![0.0], vec![1.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let r = rejection_sample(|_| f64::NEG_INFINITY, &q, 0.0, 10, 5000, &mut rng);
        assert!(matches!(r, Err(Error::Exhausted { .. })));
    }

    #[test]
    fn ess_limits() {
        assert!((ess_fraction(&[0.3; 50]).unwrap() - 1.0).abs() < 1e-12);
        let mut lw = vec![-1000.0; 100];
        lw[3] = 0.0;
        assert!((ess_fraction(&lw).unwrap() - 0.01).abs() < 1e-12);
        let shifted: Vec<f64> = lw.iter().map(|l| l + 5.0).collect();
        assert!((ess_fraction(&shifted).unwrap() - ess_fraction(&lw).unwrap()).abs() < 1e-15);
        assert!(matches!(
            ess_fraction(&[f64::NEG_INFINITY; 3]),
            Err(Error::DegenerateWeights(_))
        ));
    }
}
