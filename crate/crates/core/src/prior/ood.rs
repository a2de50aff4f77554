use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PriorSpec;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    /// Empirical `alpha`-quantile of `log p_train` under `p_train`.
    pub threshold: f64,
    /// Fraction of `q` draws with `log p_train` below the threshold.
    pub fraction: f64,
    pub alpha: f64,
    pub m_p: usize,
    pub m_q: usize,
    pub passed: bool,
}

/// Estimates how much of `q` lies in the low-density tail of `p_train`.
pub fn ood_check<R: Rng + ?Sized>(
    p_train: &PriorSpec,
    q: &PriorSpec,
    alpha: f64,
    m_p: usize,
    m_q: usize,
    rng: &mut R,
) -> Result<OodReport> {
    check_len(p_train.dim(), q.dim(), "prior dimensions")?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if m_p == 0 || m_q == 0 {
        return Err(Error::Domain("sample counts must be positive".into()));
    }
    let mut lp = Vec::with_capacity(m_p);
    for _ in 0..m_p {
        lp.push(p_train.log_density(&p_train.sample(rng)?)?);
    }
    lp.sort_by(f64::total_cmp);
    let idx = ((alpha * m_p as f64).ceil() as usize).clamp(1, m_p) - 1;
    let threshold = lp[idx];
    let mut below = 0usize;
    for _ in 0..m_q {
        if p_train.log_density(&q.sample(rng)?)? < threshold {
            below += 1;
        }
    }
    let fraction = below as f64 / m_q as f64;
    Ok(OodReport {
        threshold,
        fraction,
        alpha,
        m_p,
        m_q,
        passed: fraction <= alpha,
    })
}

impl OodReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            Ok(self)
        } else {
            Err(Error::OutOfDistribution {
                fraction: self.fraction,
                alpha: self.alpha,
            })
        }
    }
}
