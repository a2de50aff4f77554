//! Sample-based evaluation measures and prior-shift distances.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::prior::PriorSpec;

pub const MMTV_BINS: usize = 50;
pub const C2ST_FOLDS: usize = 5;
pub const MMD_LENGTHSCALE: f64 = 1.0;

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &'static str) -> Result<()> {
    check_len(a.ncols(), b.ncols(), what)?;
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Domain(format!("{what}: empty sample set")));
    }
    Ok(())
}

/// `sqrt(mean_{l,j} (y_l - yhat_{j,l})^2)` for samples `(N, L)`.
pub fn rmse(truth: &[f64], samples: ArrayView2<f64>) -> Result<f64> {
    check_len(truth.len(), samples.ncols(), "rmse truth")?;
    if samples.is_empty() {
        return Err(Error::Domain("rmse: empty sample set".into()));
    }
    let sse: f64 = samples
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok((sse / samples.len() as f64).sqrt())
}

/// Mean over dimensions of the total variation between histogram
/// marginals, `MMTV_BINS` equal-width bins over the union range.
pub fn mmtv(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair(a, b, "mmtv")?;
    let d = a.ncols();
    let mut total = 0.0;
    for j in 0..d {
        let (ca, cb) = (a.column(j), b.column(j));
        let lo = ca.iter().chain(cb.iter()).copied().fold(f64::INFINITY, f64::min);
        let hi = ca.iter().chain(cb.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Domain("mmtv: non-finite samples".into()));
        }
        let width = (hi - lo) / MMTV_BINS as f64;
        let bin = |x: f64| -> usize {
            if width == 0.0 {
                0
            } else {
                (((x - lo) / width) as usize).min(MMTV_BINS - 1)
            }
        };
        let mut ha = [0.0; MMTV_BINS];
        let mut hb = [0.0; MMTV_BINS];
        ca.iter().for_each(|x| ha[bin(*x)] += 1.0 / ca.len() as f64);
        cb.iter().for_each(|x| hb[bin(*x)] += 1.0 / cb.len() as f64);
        total += 0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    Ok((total / d as f64).clamp(0.0, 1.0))
}

/// Cross-validated accuracy of a k-nearest-neighbour classifier separating
/// `a` from `b`, on pooled z-scored features with `k = floor(sqrt(n_train))`.
pub fn c2st<R: Rng + ?Sized>(a: ArrayView2<f64>, b: ArrayView2<f64>, folds: usize, rng: &mut R) -> Result<f64> {
    check_pair(a, b, "c2st")?;
    let n = a.nrows() + b.nrows();
    if folds < 2 || folds > n {
        return Err(Error::Domain(format!("c2st needs 2 <= folds <= {n}")));
    }
    let pooled = ndarray::concatenate(Axis(0), &[a, b]).expect("same width");
    let mean = pooled.mean_axis(Axis(0)).expect("non-empty");
    let std = pooled.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-300 { s } else { 1.0 });
    let x = (&pooled - &mean) / &std;
    let labels: Vec<bool> = (0..n).map(|i| i >= a.nrows()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut correct = 0usize;
    for f in 0..folds {
        let test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, &j)| j).collect();
        let train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, &j)| j).collect();
        let k = ((train.len() as f64).sqrt().floor() as usize).clamp(1, train.len());
        correct += test
            .par_iter()
            .filter(|&&i| {
                let xi = x.row(i);
                let mut dist: Vec<(f64, usize)> = train
                    .iter()
                    .map(|&j| {
                        let d2: f64 = xi.iter().zip(x.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                        (d2, j)
                    })
                    .collect();
                dist.select_nth_unstable_by(k - 1, |p, q| p.0.total_cmp(&q.0));
                let near = &mut dist[..k];
                let votes_b = near.iter().filter(|(_, j)| labels[*j]).count();
                let pred = match (2 * votes_b).cmp(&k) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Less => false,
                    std::cmp::Ordering::Equal => {
                        let nn = near.iter().min_by(|p, q| p.0.total_cmp(&q.0)).expect("k >= 1");
                        labels[nn.1]
                    }
                };
                pred == labels[i]
            })
            .count();
    }
    Ok(correct as f64 / n as f64)
}

/// Square root of the biased (V-statistic) MMD^2 with kernel
/// `exp(-|x - y|^2 / (2 l^2))`, clamped at zero.
pub fn mmd(a: ArrayView2<f64>, b: ArrayView2<f64>, lengthscale: f64) -> Result<f64> {
    check_pair(a, b, "mmd")?;
    if !(lengthscale > 0.0) {
        return Err(Error::Domain("mmd lengthscale must be positive".into()));
    }
    let inv = 1.0 / (2.0 * lengthscale * lengthscale);
    let mean_k = |x: ArrayView2<f64>, y: ArrayView2<f64>| -> f64 {
        let s: f64 = (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let xi = x.row(i);
                y.rows()
                    .into_iter()
                    .map(|yj| {
                        let d2: f64 = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum();
                        (-d2 * inv).exp()
                    })
                    .sum::<f64>()
            })
            .sum();
        s / (x.nrows() * y.nrows()) as f64
    };
    let m2 = mean_k(a, a) + mean_k(b, b) - 2.0 * mean_k(a, b);
    Ok(m2.max(0.0).sqrt())
}

/// Mahalanobis distance of the means under `p`'s covariance and the
/// Gaussian 2-Wasserstein distance, both for diagonal Gaussians.
pub fn prior_shift_distances(p: &PriorSpec, q: &PriorSpec) -> Result<(f64, f64)> {
    let (PriorSpec::GaussianDiag { mean: mp, std: sp }, PriorSpec::GaussianDiag { mean: mq, std: sq }) = (p, q) else {
        return Err(Error::Unsupported("prior-shift distances need two diagonal Gaussians".into()));
    };
    check_len(mp.len(), mq.len(), "prior dimensions")?;
    let mut d2 = 0.0;
    let mut w2 = 0.0;
    for i in 0..mp.len() {
        let delta = mq[i] - mp[i];
        d2 += delta * delta / (sp[i] * sp[i]);
        w2 += delta * delta + (sp[i] - sq[i]).powi(2);
    }
    Ok((d2.sqrt(), w2.sqrt()))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len(), "spearman")?;
    if x.len() < 2 {
        return Err(Error::Domain("spearman needs at least two points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Domain("spearman: constant input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// One evaluation row; serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub simulator: String,
    pub prior_family: String,
    pub run: usize,
    pub rmse: f64,
    /// Reference-based metrics; absent when no ground truth exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2st: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmtv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wasserstein2: Option<f64>,
    pub n_samples: usize,
    pub n_reference: usize,
    pub mmtv_bins: usize,
}

/// Every metric of `samples` against the true value and, when given, a
/// reference sample set.
pub struct Evaluation<'a> {
    pub truth: &'a [f64],
    pub samples: ArrayView2<'a, f64>,
    pub reference: Option<ArrayView2<'a, f64>>,
}

impl Evaluation<'_> {
    pub fn report<R: Rng + ?Sized>(
        &self,
        method: &str,
        simulator: &str,
        prior_family: &str,
        run: usize,
        rng: &mut R,
    ) -> Result<MetricReport> {
        Ok(MetricReport {
            method: method.into(),
            simulator: simulator.into(),
            prior_family: prior_family.into(),
            run,
            rmse: rmse(self.truth, self.samples)?,
            c2st: self.reference.map(|r| c2st(self.samples, r, C2ST_FOLDS, rng)).transpose()?,
            mmtv: self.reference.map(|r| mmtv(self.samples, r)).transpose()?,
            mmd: self.reference.map(|r| mmd(self.samples, r, MMD_LENGTHSCALE)).transpose()?,
            d_prime: None,
            wasserstein2: None,
            n_samples: self.samples.nrows(),
            n_reference: self.reference.map_or(0, |r| r.nrows()),
            mmtv_bins: MMTV_BINS,
        })
    }
}

impl MetricReport {
    pub fn append_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}
