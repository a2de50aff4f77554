use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PriorSpec;
use crate::error::{check_len, Error, Result};
use crate::util::{log_normal_diag, log_sum_exp};

/// Generalized Gaussian mixture `r(theta) = sum_i w_i N(theta | mu_i, Sigma_i)`
/// with positive weights that need not sum to one. Zero outside `support`
/// when a box is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioGmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<(Vec<f64>, Vec<f64>)>,
}

impl RatioGmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let r = Self {
            weights,
            means,
            variances,
            support: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn with_support(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_len(self.dim(), lower.len(), "ratio support")?;
        check_len(self.dim(), upper.len(), "ratio support")?;
        if lower.iter().zip(&upper).any(|(a, b)| !(a < b)) {
            return Err(Error::Domain("ratio support needs a_i < b_i".into()));
        }
        self.support = Some((lower, upper));
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Domain("ratio needs at least one component".into()));
        }
        check_len(self.weights.len(), self.means.len(), "ratio means")?;
        check_len(self.weights.len(), self.variances.len(), "ratio variances")?;
        let d = self.means[0].len();
        if d == 0 {
            return Err(Error::Domain("ratio needs at least one dimension".into()));
        }
        for (m, v) in self.means.iter().zip(&self.variances) {
            check_len(d, m.len(), "ratio mean")?;
            check_len(d, v.len(), "ratio variance")?;
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) || m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Domain("ratio components need finite means, positive variances".into()));
            }
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Unsupported(
                "ratio weights must be positive (signed mixtures are not supported)".into(),
            ));
        }
        if let Some((a, b)) = &self.support {
            check_len(d, a.len(), "ratio support")?;
            check_len(d, b.len(), "ratio support")?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn inside(&self, theta: &[f64]) -> bool {
        match &self.support {
            None => true,
            Some((a, b)) => theta
                .iter()
                .zip(a.iter().zip(b))
                .all(|(x, (a, b))| *x >= *a && *x <= *b),
        }
    }

    /// `log r(theta)` without the support restriction.
    pub fn log_eval_untruncated(&self, theta: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w.ln() + log_normal_diag(theta, m, v))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn log_eval(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.dim(), theta.len(), "ratio input")?;
        if !self.inside(theta) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(self.log_eval_untruncated(theta))
    }

    pub fn eval(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.log_eval(theta)?.exp())
    }

    /// The same function expressed in coordinates `u` with `theta = m + s * u`.
    pub fn pull_back(&self, m: &[f64], s: &[f64]) -> Result<Self> {
        check_len(self.dim(), m.len(), "affine shift")?;
        check_len(self.dim(), s.len(), "affine scale")?;
        let jac: f64 = s.iter().product();
        let fwd = |x: &[f64]| -> Vec<f64> {
            x.iter().zip(m).zip(s).map(|((x, m), s)| (x - m) / s).collect()
        };
        Ok(Self {
            weights: self.weights.iter().map(|w| w / jac).collect(),
            means: self.means.iter().map(|mu| fwd(mu)).collect(),
            variances: self
                .variances
                .iter()
                .map(|v| v.iter().zip(s).map(|(v, s)| v / (s * s)).collect())
                .collect(),
            support: self.support.as_ref().map(|(a, b)| (fwd(a), fwd(b))),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: RatioGmm = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        r.validate()?;
        Ok(r)
    }
}

/// `q(theta) / p_train(theta)`, zero outside the support of `p_train`.
pub fn ratio_exact(p_train: &PriorSpec, q: &PriorSpec, theta: &[f64]) -> Result<f64> {
    check_len(p_train.dim(), q.dim(), "prior dimensions")?;
    let lp = p_train.log_density(theta)?;
    let lq = q.log_density(theta)?;
    if lp == f64::NEG_INFINITY {
        if lq > f64::NEG_INFINITY {
            return Err(Error::RatioValidity(format!(
                "q has mass at {theta:?} where p_train has none; truncate q first"
            )));
        }
        return Ok(0.0);
    }
    Ok((lq - lp).exp())
}

/// Closed-form ratio of two diagonal Gaussians as a single weighted
/// component. Needs `var_q < var_p` in every dimension.
pub fn gaussian_ratio(p_train: &PriorSpec, q: &PriorSpec) -> Result<RatioGmm> {
    let (PriorSpec::GaussianDiag { mean: mp, std: sp }, PriorSpec::GaussianDiag { mean: mq, std: sq }) =
        (p_train, q)
    else {
        return Err(Error::Unsupported("closed-form ratio needs two diagonal Gaussians".into()));
    };
    check_len(mp.len(), mq.len(), "prior dimensions")?;
    let d = mp.len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..d {
        let (vp, vq) = (sp[i] * sp[i], sq[i] * sq[i]);
        let prec = 1.0 / vq - 1.0 / vp;
        if !(prec > 0.0) {
            return Err(Error::RatioValidity(format!(
                "q is not narrower than p_train in dimension {i}; ratio is not integrable"
            )));
        }
        var[i] = 1.0 / prec;
        mean[i] = var[i] * (mq[i] / vq - mp[i] / vp);
    }
    let log_c = q.log_density(&mean)? - p_train.log_density(&mean)? - log_normal_diag(&mean, &mean, &var);
    RatioGmm::new(vec![log_c.exp()], vec![mean], vec![var])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_ratio_is_scaled_q() {
        let p = PriorSpec::uniform(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let q = PriorSpec::truncated(
            PriorSpec::gaussian(vec![0.0, 0.0], vec![0.2, 0.2]).unwrap(),
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let th = [0.1, -0.3];
        let r = ratio_exact(&p, &q, &th).unwrap();
        assert!((r - 4.0 * q.density(&th).unwrap()).abs() < 1e-12);
        assert_eq!(ratio_exact(&p, &q, &[1.5, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn untruncated_q_outside_box_is_invalid() {
        let p = PriorSpec::uniform(vec![-1.0], vec![1.0]).unwrap();
        let q = PriorSpec::gaussian(vec![0.0], vec![0.2]).unwrap();
        assert!(matches!(ratio_exact(&p, &q, &[2.0]), Err(Error::RatioValidity(_))));
    }

    #[test]
    fn self_ratio_is_one() {
        let p = PriorSpec::gaussian(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        for th in [[0.0, 0.0], [1.0, 3.0], [-2.0, 0.5]] {
            assert!((ratio_exact(&p, &p, &th).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_matches_exact_ratio() {
        let s = 0.1f64.sqrt();
        let p = PriorSpec::gaussian(vec![0.0; 3], vec![s; 3]).unwrap();
        let q = PriorSpec::gaussian(vec![0.2, -0.1, 0.05], vec![0.2 * s; 3]).unwrap();
        let r = gaussian_ratio(&p, &q).unwrap();
        for k in 0..100 {
            let x = k as f64 / 100.0;
            let th = [0.2 + 0.1 * (7.0 * x).sin(), -0.1 + 0.1 * (3.0 * x).cos(), 0.1 * x];
            let want = ratio_exact(&p, &q, &th).unwrap();
            let got = r.eval(&th).unwrap();
            assert!((got - want).abs() <= 1e-8 * want, "{got} vs {want}");
        }
        assert!(gaussian_ratio(&q, &p).is_err());
    }

    #[test]
    fn pull_back_preserves_values() {
        let r = RatioGmm::new(
            vec![2.0, 0.5],
            vec![vec![0.1, 0.2], vec![-0.4, 0.3]],
            vec![vec![0.05, 0.1], vec![0.2, 0.02]],
        )
        .unwrap();
        let (m, s) = ([0.3, -0.2], [0.5, 2.0]);
        let u = r.pull_back(&m, &s).unwrap();
        let uu = [0.2, 0.1];
        let th = [m[0] + s[0] * uu[0], m[1] + s[1] * uu[1]];
        assert!((u.eval(&uu).unwrap() - r.eval(&th).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_unsupported() {
        let r = RatioGmm::new(vec![-1.0], vec![vec![0.0]], vec![vec![1.0]]);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}
