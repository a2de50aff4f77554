use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ratio_exact, PriorSpec, RatioGmm};
use crate::error::{check_len, Error, Result};
use crate::util::LN_2PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub n_components: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps between checks on the fixed probe set. A check that does not
    /// improve on the best loss restores the best point and halves the step.
    pub check_every: usize,
    /// Stop when the probe loss improves by less than this fraction per check.
    pub rel_tol: f64,
    /// Stop once the probe relative L2 error falls below this.
    pub target_rel_l2: f64,
    pub n_probe: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_components: 20,
            lr: 0.01,
            batch_size: 1000,
            max_steps: 100_000,
            check_every: 1_000,
            rel_tol: 1e-4,
            target_rel_l2: 1e-3,
            n_probe: 4_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: usize,
    /// Mean squared error on the probe set.
    pub loss: f64,
    /// `sqrt(E[(g - r)^2] / E[r^2])` on the probe set.
    pub rel_l2: f64,
    /// True when the ratio was set in closed form (uniform training prior).
    pub skipped: bool,
}

/// Flat parameter vector `[log w (K) | mu (K*d) | log s (K*d)]`.
struct Params {
    k: usize,
    d: usize,
    x: Vec<f64>,
}

impl Params {
    fn log_w(&self, k: usize) -> f64 {
        self.x[k]
    }
    fn mu(&self, k: usize, i: usize) -> f64 {
        self.x[self.k + k * self.d + i]
    }
    fn log_s(&self, k: usize, i: usize) -> f64 {
        self.x[self.k + self.k * self.d + k * self.d + i]
    }

    /// `log w_k + log N(theta | mu_k, s_k^2)` for every component.
    fn log_terms(&self, theta: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = self.log_w(k);
            for (i, th) in theta.iter().enumerate() {
                let ls = self.log_s(k, i);
                let z = (th - self.mu(k, i)) * (-ls).exp();
                acc -= 0.5 * (z * z + LN_2PI) + ls;
            }
            *o = acc;
        }
    }

    fn to_ratio(&self) -> Result<RatioGmm> {
        let weights = (0..self.k).map(|k| self.log_w(k).exp()).collect();
        let means = (0..self.k)
            .map(|k| (0..self.d).map(|i| self.mu(k, i)).collect())
            .collect();
        let variances = (0..self.k)
            .map(|k| (0..self.d).map(|i| (2.0 * self.log_s(k, i)).exp()).collect())
            .collect();
        RatioGmm::new(weights, means, variances)
    }
}

fn draw_nu<R: Rng + ?Sized>(p: &PriorSpec, q: &PriorSpec, rng: &mut R) -> Result<Vec<f64>> {
    if rng.random::<bool>() {
        q.sample(rng)
    } else {
        p.sample(rng)
    }
}

/// Closed-form ratio for a uniform training prior: `r = V q` on the box.
fn uniform_ratio(p_train: &PriorSpec, q: &PriorSpec) -> Result<RatioGmm> {
    let (lower, upper) = p_train.support().expect("uniform box");
    let volume = p_train.volume().expect("uniform box");
    let (base, mass) = match q {
        PriorSpec::Truncated { base, .. } => (base.as_ref(), q.truncation_mass()?),
        other => (other, 1.0),
    };
    let (w, m, v) = base.components().ok_or_else(|| {
        Error::Unsupported("closed-form ratio needs a Gaussian or mixture target prior".into())
    })?;
    let keep: Vec<usize> = (0..w.len()).filter(|&k| w[k] > 0.0).collect();
    RatioGmm::new(
        keep.iter().map(|&k| w[k] * volume / mass).collect(),
        keep.iter().map(|&k| m[k].clone()).collect(),
        keep.iter().map(|&k| v[k].clone()).collect(),
    )?
    .with_support(lower.to_vec(), upper.to_vec())
}

/// `(log_offset + log E[1 / p], mean, var)` of draws weighted by `1 / p`.
fn weighted_moments(p: &PriorSpec, draws: &[Vec<f64>], log_offset: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut lw = Vec::with_capacity(draws.len());
    for th in draws {
        lw.push(-p.log_density(th)?);
    }
    if lw.iter().all(|l| !l.is_finite()) {
        return Err(Error::RatioValidity("q has no mass inside p_train's support".into()));
    }
    let top = lw.iter().copied().filter(|l| l.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let wts: Vec<f64> = lw.iter().map(|l| if l.is_finite() { (l - top).exp() } else { 0.0 }).collect();
    let total: f64 = wts.iter().sum();
    let d = draws[0].len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for (th, w) in draws.iter().zip(&wts) {
        for i in 0..d {
            mean[i] += w * th[i] / total;
        }
    }
    for (th, w) in draws.iter().zip(&wts) {
        for i in 0..d {
            var[i] += w * (th[i] - mean[i]).powi(2) / total;
        }
    }
    let log_mass = log_offset + top + (total / draws.len() as f64).ln();
    Ok((log_mass, mean, var))
}

/// Fits a positive-weight diagonal mixture to `q / p_train` by Adam on the
/// squared error under `0.5 q + 0.5 p_train`. A uniform `p_train` skips the
/// fit.
pub fn fit_gmm_ratio<R: Rng + ?Sized>(
    p_train: &PriorSpec,
    q: &PriorSpec,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<(RatioGmm, FitReport)> {
    check_len(p_train.dim(), q.dim(), "prior dimensions")?;
    if cfg.n_components == 0 || cfg.batch_size == 0 || cfg.check_every == 0 || cfg.n_probe == 0 {
        return Err(Error::Config("fit sizes must be positive".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config("fit lr must be positive".into()));
    }
    let d = p_train.dim();

    let probe: Vec<Vec<f64>> = (0..cfg.n_probe)
        .map(|_| draw_nu(p_train, q, rng))
        .collect::<Result<_>>()?;
    let probe_r: Vec<f64> = probe
        .iter()
        .map(|th| ratio_exact(p_train, q, th))
        .collect::<Result<_>>()?;
    let r2: f64 = probe_r.iter().map(|r| r * r).sum::<f64>() / probe.len() as f64;

    if matches!(p_train, PriorSpec::UniformBox { .. }) {
        let ratio = uniform_ratio(p_train, q)?;
        let loss = probe
            .iter()
            .zip(&probe_r)
            .map(|(th, r)| (ratio.eval(th).unwrap_or(0.0) - r).powi(2))
            .sum::<f64>()
            / probe.len() as f64;
        return Ok((
            ratio,
            FitReport {
                steps: 0,
                loss,
                rel_l2: (loss / r2).sqrt(),
                skipped: true,
            },
        ));
    }

    // Initialization. When q is Gaussian or a GMM, each q component c gets
    // the importance-weighted moments and mass of q_c / p_train from draws of
    // q_c (weights 1 / p_train); components are cycled in weight order.
    // Otherwise: K draws of q with q's spread, total weight E_q[1 / p_train].
    let k = cfg.n_components;
    let mut x = vec![0.0; k + 2 * k * d];
    match q.components() {
        Some((w, m, v)) => {
            let mut order: Vec<usize> = (0..w.len()).collect();
            order.sort_by(|a, b| w[*b].total_cmp(&w[*a]));
            let owner: Vec<usize> = (0..k).map(|kk| order[kk % order.len()]).collect();
            let mut init = Vec::with_capacity(w.len());
            for c in 0..w.len() {
                let qc = PriorSpec::gaussian(m[c].clone(), v[c].iter().map(|v| v.sqrt()).collect())?;
                let draws = qc.sample_n(rng, 2000)?;
                init.push(weighted_moments(p_train, &draws, w[c].ln())?);
            }
            for kk in 0..k {
                let c = owner[kk];
                let share = owner.iter().filter(|&&o| o == c).count() as f64;
                let (log_mass, mean, var) = &init[c];
                x[kk] = log_mass - share.ln();
                for i in 0..d {
                    x[k + kk * d + i] = mean[i];
                    x[k + k * d + kk * d + i] = 0.5 * var[i].max(1e-24).ln();
                }
            }
        }
        None => {
            let draws = q.sample_n(rng, 1000.max(k))?;
            let (_, q_std) = crate::util::column_stats(&draws);
            let (log_mass, _, _) = weighted_moments(p_train, &draws, 0.0)?;
            for kk in 0..k {
                x[kk] = log_mass - (k as f64).ln();
                for i in 0..d {
                    x[k + kk * d + i] = draws[kk][i];
                    x[k + k * d + kk * d + i] = q_std[i].max(1e-12).ln();
                }
            }
        }
    }
    let mut params = Params { k, d, x };

    let probe_loss = |p: &Params| -> f64 {
        let mut lt = vec![0.0; k];
        probe
            .iter()
            .zip(&probe_r)
            .map(|(th, r)| {
                p.log_terms(th, &mut lt);
                let g: f64 = lt.iter().map(|l| l.exp()).sum();
                (g - r).powi(2)
            })
            .sum::<f64>()
            / probe.len() as f64
    };

    // Rescale the weights to the least-squares optimum on the probe set; the
    // Monte Carlo mass estimate is poor in high dimension.
    {
        let mut lt = vec![0.0; k];
        let (mut gr, mut gg) = (0.0, 0.0);
        for (th, r) in probe.iter().zip(&probe_r) {
            params.log_terms(th, &mut lt);
            let g: f64 = lt.iter().map(|l| l.exp()).sum();
            gr += g * r;
            gg += g * g;
        }
        if gr > 0.0 && gg > 0.0 && (gr / gg).is_finite() {
            let shift = (gr / gg).ln();
            params.x[..k].iter_mut().for_each(|w| *w += shift);
        }
    }

    let mut best_x = params.x.clone();
    let mut best_loss = probe_loss(&params);
    let mut lr = cfg.lr;
    let n = params.x.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut grad = vec![0.0; n];
    let mut lt = vec![0.0; k];
    let mut steps = 0;

    for step in 1..=cfg.max_steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let th = draw_nu(p_train, q, rng)?;
            let r = ratio_exact(p_train, q, &th)?;
            params.log_terms(&th, &mut lt);
            let g: f64 = lt.iter().map(|l| l.exp()).sum();
            let e = g - r;
            batch_loss += e * e;
            let scale = 2.0 * e / cfg.batch_size as f64;
            for kk in 0..k {
                let wn = lt[kk].exp() * scale;
                if wn == 0.0 {
                    continue;
                }
                grad[kk] += wn;
                for i in 0..d {
                    let inv_s = (-params.log_s(kk, i)).exp();
                    let z = (th[i] - params.mu(kk, i)) * inv_s;
                    grad[k + kk * d + i] += wn * z * inv_s;
                    grad[k + k * d + kk * d + i] += wn * (z * z - 1.0);
                }
            }
        }
        steps = step;
        if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            params.x = best_x;
            return Err(Error::Fit {
                steps: step,
                reason: format!("non-finite loss {batch_loss}"),
                best: Box::new(params.to_ratio()?),
            });
        }
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for j in 0..n {
            m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
            v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
            params.x[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }

        if step % cfg.check_every == 0 {
            let l = probe_loss(&params);
            if l < best_loss {
                let small = best_loss - l < cfg.rel_tol * best_loss;
                best_loss = l;
                best_x.clone_from(&params.x);
                if small || best_loss <= cfg.target_rel_l2.powi(2) * r2 {
                    break;
                }
            } else {
                // Overshot: back to the best point with a smaller step.
                params.x.clone_from(&best_x);
                lr *= 0.5;
                if lr < cfg.lr * 1e-2 {
                    break;
                }
            }
        }
    }
    let final_loss = probe_loss(&params);
    if final_loss < best_loss {
        best_loss = final_loss;
        best_x.clone_from(&params.x);
    }
    params.x = best_x;
    Ok((
        params.to_ratio()?,
        FitReport {
            steps,
            loss: best_loss,
            rel_l2: (best_loss / r2).sqrt(),
            skipped: false,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn uniform_training_prior_skips_fit() {
        let p = PriorSpec::uniform(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let q = PriorSpec::gaussian(vec![0.1, 0.2], vec![0.1, 0.1]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (r, rep) = fit_gmm_ratio(&p, &q, &FitConfig::default(), &mut rng).unwrap();
        assert!(rep.skipped);
        assert_eq!(r.weights, vec![4.0]);
        assert!(r.support.is_some());
    }

    #[test]
    fn identity_ratio_is_approximately_constant() {
        let p = PriorSpec::gaussian(vec![0.0], vec![1.0]).unwrap();
        let cfg = FitConfig {
            n_components: 5,
            batch_size: 200,
            max_steps: 4000,
            check_every: 1000,
            ..FitConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (r, _) = fit_gmm_ratio(&p, &p, &cfg, &mut rng).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            // Probe where nu has mass: |theta| <= 2.
            let th = -2.0 + 4.0 * i as f64 / 999.0;
            worst = worst.max((r.eval(&[th]).unwrap() - 1.0).abs());
        }
        assert!(worst <= 0.1, "max deviation {worst}");
    }
}
