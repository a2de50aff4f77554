//! Prior-ratio guidance.
//!
//! With the reverse kernel approximated by `N(mu_{0|t}, c(t) I)`, where
//! `mu_{0|t} = z + sigma^2 s(z)` and `c(t) = sigma^2 / (1 + sigma^2)`, the
//! expectation of a Gaussian-mixture ratio is again a mixture in
//! `mu_{0|t}`. Its gradient in `z` is
//!
//! ```text
//! u^T (I + sigma^2 ds/dz),   u = sum_i w~_i (Sigma_i + c I)^{-1} (mu_i - mu_{0|t})
//! w~_i = softmax_i( log w_i + log N(mu_i | mu_{0|t}, Sigma_i + c I) )
//! ```
//!
//! evaluated with one vector-Jacobian product per batch.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::RatioGmm;
use crate::schedule::{check_time, NoiseSchedule};
use crate::score::{Condition, ScoreModel};
use crate::util::{softmax_in_place, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// When set, rows with `|guidance| > cap * |score|` are rescaled to that
    /// bound.
    #[serde(default)]
    pub norm_cap: Option<f64>,
}

impl GuidanceConfig {
    pub fn capped(factor: f64) -> Self {
        Self {
            norm_cap: Some(factor),
        }
    }
}

/// Everything computed for one guided score evaluation on a batch.
#[derive(Debug, Clone)]
pub struct GuidanceResult {
    /// Unguided score, `(n, d_latent)`.
    pub score: Array2<f64>,
    /// Guidance term, `(n, d_latent)`.
    pub guidance: Array2<f64>,
    /// Normalized component weights `w~`, `(n, K)`.
    pub weights: Array2<f64>,
    /// Residual `u` on the theta coordinates, `(n, d_theta)`.
    pub residual: Array2<f64>,
    /// Unguided Tweedie mean, `(n, d_latent)`.
    pub tweedie_mean: Array2<f64>,
    pub sigma2: f64,
}

impl GuidanceResult {
    pub fn guided_score(&self) -> Array2<f64> {
        &self.score + &self.guidance
    }

    /// `mu_{0|t} + sigma^2 * guidance`.
    pub fn updated_tweedie_mean(&self) -> Array2<f64> {
        &self.tweedie_mean + &(&self.guidance * self.sigma2)
    }
}

/// `sigma^2 / (1 + sigma^2)`.
pub fn reverse_cov_scale(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    check_time(t)?;
    let s2 = schedule.sigma(t).powi(2);
    Ok(s2 / (1.0 + s2))
}

/// `z + sigma(t)^2 * s(z)` row-wise.
pub fn tweedie_mean<M: ScoreModel + ?Sized>(
    model: &M,
    z: ArrayView2<f64>,
    t: f64,
    cond: &Condition,
) -> Result<Array2<f64>> {
    let s = model.score(z, t, cond)?;
    let s2 = model.schedule().sigma(t).powi(2);
    Ok(&z + &(s * s2))
}

fn check_theta_index(theta_index: &[usize], latent_dim: usize, ratio: &RatioGmm) -> Result<()> {
    crate::error::check_len(ratio.dim(), theta_index.len(), "ratio dimension vs theta slice")?;
    if theta_index.iter().any(|&i| i >= latent_dim) {
        return Err(Error::Domain(format!(
            "theta slice {theta_index:?} exceeds latent dimension {latent_dim}"
        )));
    }
    Ok(())
}

/// Residual `u` and normalized weights for one Tweedie mean restricted to
/// theta. `c` is the reverse-kernel variance scale.
pub fn mixture_residual(
    ratio: &RatioGmm,
    mu_theta: &[f64],
    c: f64,
    weights_out: &mut [f64],
    u_out: &mut [f64],
) -> std::result::Result<(), String> {
    for (k, l) in weights_out.iter_mut().enumerate() {
        let mut acc = ratio.weights[k].ln();
        for (i, m) in mu_theta.iter().enumerate() {
            let var = ratio.variances[k][i] + c;
            let d = ratio.means[k][i] - m;
            acc -= 0.5 * (d * d / var + LN_2PI + var.ln());
        }
        *l = acc;
    }
    let max = weights_out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(format!("log-weights not finite (max {max}) at mu_theta={mu_theta:?}"));
    }
    softmax_in_place(weights_out);
    u_out.fill(0.0);
    for (k, w) in weights_out.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for (i, m) in mu_theta.iter().enumerate() {
            u_out[i] += w * (ratio.means[k][i] - m) / (ratio.variances[k][i] + c);
        }
    }
    Ok(())
}

/// Guidance term and its ingredients on a batch. `theta_index` lists the
/// latent coordinates the ratio lives on.
pub fn guidance_term<M: ScoreModel + ?Sized>(
    model: &M,
    ratio: &RatioGmm,
    z: ArrayView2<f64>,
    t: f64,
    cond: &Condition,
    theta_index: &[usize],
    cfg: &GuidanceConfig,
) -> Result<GuidanceResult> {
    check_time(t)?;
    let d = model.latent_dim(cond)?;
    check_theta_index(theta_index, d, ratio)?;
    let (score, pullback) = model.linearize(z, t, cond)?;
    let sigma2 = model.schedule().sigma(t).powi(2);
    let c = sigma2 / (1.0 + sigma2);
    let tweedie = &z + &(&score * sigma2);

    let n = z.nrows();
    let k = ratio.n_components();
    let dt = theta_index.len();
    let mut weights = Array2::zeros((n, k));
    let mut residual = Array2::zeros((n, dt));
    let mut u_full = Array2::zeros((n, d));
    let mut mu_theta = vec![0.0; dt];
    let mut w_row = vec![0.0; k];
    let mut u_row = vec![0.0; dt];
    for b in 0..n {
        for (j, &i) in theta_index.iter().enumerate() {
            mu_theta[j] = tweedie[[b, i]];
        }
        mixture_residual(ratio, &mu_theta, c, &mut w_row, &mut u_row).map_err(|reason| {
            Error::GuidanceDegenerate {
                t,
                step: None,
                reason: format!("{reason}; z={:?}", z.row(b).to_vec()),
            }
        })?;
        for (kk, w) in w_row.iter().enumerate() {
            weights[[b, kk]] = *w;
        }
        for (j, &i) in theta_index.iter().enumerate() {
            residual[[b, j]] = u_row[j];
            u_full[[b, i]] = u_row[j];
        }
    }
    let jac = pullback.vjp(u_full.view())?;
    let mut guidance = u_full + &(jac * sigma2);

    if let Some(cap) = cfg.norm_cap {
        for (mut g, s) in guidance.rows_mut().into_iter().zip(score.rows()) {
            let gn = g.dot(&g).sqrt();
            let sn = s.dot(&s).sqrt();
            if gn > cap * sn && gn > 0.0 {
                g *= cap * sn / gn;
            }
        }
    }
    Ok(GuidanceResult {
        score,
        guidance,
        weights,
        residual,
        tweedie_mean: tweedie,
        sigma2,
    })
}

/// `s(z) + guidance(z)`.
pub fn guided_score<M: ScoreModel + ?Sized>(
    model: &M,
    ratio: &RatioGmm,
    z: ArrayView2<f64>,
    t: f64,
    cond: &Condition,
    theta_index: &[usize],
    cfg: &GuidanceConfig,
) -> Result<Array2<f64>> {
    Ok(guidance_term(model, ratio, z, t, cond, theta_index, cfg)?.guided_score())
}

/// `mu_{0|t} + sigma^2 * guidance`.
pub fn updated_tweedie_mean<M: ScoreModel + ?Sized>(
    model: &M,
    ratio: &RatioGmm,
    z: ArrayView2<f64>,
    t: f64,
    cond: &Condition,
    theta_index: &[usize],
    cfg: &GuidanceConfig,
) -> Result<Array2<f64>> {
    Ok(guidance_term(model, ratio, z, t, cond, theta_index, cfg)?.updated_tweedie_mean())
}

/// Guided score of the joint latent `(x*, theta)` given observed tokens:
/// the guidance is built from the theta coordinates of the joint Tweedie
/// mean and pulled back through the full joint latent.
pub fn predictive_substitution<M: ScoreModel + ?Sized>(
    model: &M,
    ratio: &RatioGmm,
    joint: ArrayView2<f64>,
    t: f64,
    observed: &Condition,
    theta_index: &[usize],
    cfg: &GuidanceConfig,
) -> Result<Array2<f64>> {
    guided_score(model, ratio, joint, t, observed, theta_index, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::AnalyticGmmScore;
    use ndarray::array;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn t_for_sigma(sigma: f64) -> f64 {
        let s = sched();
        (sigma / s.sigma_min()).ln() / (s.sigma_max() / s.sigma_min()).ln()
    }

    #[test]
    fn tweedie_examples() {
        let m = AnalyticGmmScore::standard_normal(2, sched());
        let mu = tweedie_mean(&m, array![[1.0, 0.0]].view(), t_for_sigma(1.0), &Condition::none())
            .unwrap();
        assert!((mu[[0, 0]] - 0.5).abs() < 1e-12 && mu[[0, 1]].abs() < 1e-15);

        let m = AnalyticGmmScore::gaussian(vec![0.5, -1.0], vec![0.3, 2.0], sched()).unwrap();
        let t = 0.55;
        let s2 = sched().sigma(t).powi(2);
        let z = array![[0.9, 0.4]];
        let mu = tweedie_mean(&m, z.view(), t, &Condition::none()).unwrap();
        for (i, (mi, si)) in [(0.5, 0.3), (-1.0, 2.0)].iter().enumerate() {
            let want = mi + si / (si + s2) * (z[[0, i]] - mi);
            assert!((mu[[0, i]] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn cov_scale() {
        assert!((reverse_cov_scale(&sched(), t_for_sigma(1.0)).unwrap() - 0.5).abs() < 1e-12);
        assert!(reverse_cov_scale(&sched(), 0.0).unwrap() < 1e-8);
        assert!(reverse_cov_scale(&sched(), 1.5).is_err());
    }

    #[test]
    fn flat_ratio_gives_no_guidance() {
        let m = AnalyticGmmScore::standard_normal(2, sched());
        let r = RatioGmm::new(vec![1.0], vec![vec![0.3, 0.1]], vec![vec![1e12, 1e12]]).unwrap();
        let z = array![[0.4, -1.2], [2.0, 0.1]];
        let g = guidance_term(&m, &r, z.view(), 0.3, &Condition::none(), &[0, 1], &GuidanceConfig::default())
            .unwrap();
        assert!(g.guidance.iter().all(|v| v.abs() < 1e-6));
        let gs = g.guided_score();
        for (a, b) in gs.iter().zip(g.score.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for row in g.weights.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn weights_are_scale_invariant() {
        let m = AnalyticGmmScore::standard_normal(2, sched());
        let r1 = RatioGmm::new(
            vec![0.2, 3.0],
            vec![vec![0.3, 0.1], vec![-1.0, 0.5]],
            vec![vec![0.1, 0.2], vec![0.3, 0.05]],
        )
        .unwrap();
        let mut r2 = r1.clone();
        r2.weights.iter_mut().for_each(|w| *w *= 1e6);
        let z = array![[0.4, -1.2]];
        let cfg = GuidanceConfig::default();
        let a = guidance_term(&m, &r1, z.view(), 0.4, &Condition::none(), &[0, 1], &cfg).unwrap();
        let b = guidance_term(&m, &r2, z.view(), 0.4, &Condition::none(), &[0, 1], &cfg).unwrap();
        for (x, y) in a.weights.iter().zip(b.weights.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_conjugate_mean_update() {
        // Base N(0,1), ratio N(1,1), sigma = 1: noised base N(0, 2).
        let m = AnalyticGmmScore::standard_normal(1, sched());
        let r = RatioGmm::new(vec![1.0], vec![vec![1.0]], vec![vec![1.0]]).unwrap();
        let t = t_for_sigma(1.0);
        let z = 0.8;
        // Target posterior-prior N(1/2, 1/2); E[theta0 | z] under it.
        let (m_star, v_star): (f64, f64) = (0.5, 0.5);
        let want = m_star + v_star / (v_star + 1.0) * (z - m_star);
        let got = updated_tweedie_mean(
            &m,
            &r,
            array![[z]].view(),
            t,
            &Condition::none(),
            &[0],
            &GuidanceConfig::default(),
        )
        .unwrap();
        assert!((got[[0, 0]] - want).abs() < 1e-12);
    }

    #[test]
    fn updated_mean_matches_guided_score() {
        let m = AnalyticGmmScore::new(
            vec![0.4, 0.6],
            vec![vec![-1.0, 0.0, 0.5], vec![1.0, 0.3, -0.5]],
            vec![vec![0.2, 0.4, 0.3], vec![0.5, 0.1, 0.2]],
            sched(),
        )
        .unwrap();
        let r = RatioGmm::new(vec![2.0], vec![vec![0.1, -0.2]], vec![vec![0.05, 0.3]]).unwrap();
        let z = array![[0.4, -1.2, 0.3]];
        let t = 0.35;
        let cfg = GuidanceConfig::default();
        let res = guidance_term(&m, &r, z.view(), t, &Condition::none(), &[2, 0], &cfg).unwrap();
        let gs = res.guided_score();
        let mu = res.updated_tweedie_mean();
        for i in 0..3 {
            assert!((mu[[0, i]] - (z[[0, i]] + res.sigma2 * gs[[0, i]])).abs() < 1e-12);
        }
    }

    #[test]
    fn cap_limits_guidance_norm() {
        let m = AnalyticGmmScore::standard_normal(2, sched());
        let r = RatioGmm::new(vec![1.0], vec![vec![50.0, 0.0]], vec![vec![1e-4, 1e-4]]).unwrap();
        let z = array![[0.1, 0.1]];
        let res = guidance_term(&m, &r, z.view(), 0.01, &Condition::none(), &[0, 1], &GuidanceConfig::capped(10.0))
            .unwrap();
        let gn = res.guidance.row(0).dot(&res.guidance.row(0)).sqrt();
        let sn = res.score.row(0).dot(&res.score.row(0)).sqrt();
        assert!(gn <= 10.0 * sn * (1.0 + 1e-12));
    }

    #[test]
    fn bad_theta_slice_is_rejected() {
        let m = AnalyticGmmScore::standard_normal(2, sched());
        let r = RatioGmm::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let z = array![[0.1, 0.1]];
        let cfg = GuidanceConfig::default();
        assert!(guidance_term(&m, &r, z.view(), 0.5, &Condition::none(), &[2], &cfg).is_err());
        assert!(guidance_term(&m, &r, z.view(), 0.5, &Condition::none(), &[0, 1], &cfg).is_err());
    }

    #[test]
    fn nan_input_is_degenerate() {
        let m = AnalyticGmmScore::standard_normal(1, sched());
        let r = RatioGmm::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let z = array![[f64::NAN]];
        let e = guidance_term(&m, &r, z.view(), 0.5, &Condition::none(), &[0], &GuidanceConfig::default());
        assert!(matches!(e, Err(Error::GuidanceDegenerate { .. })));
    }
}
