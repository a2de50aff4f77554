//! Score models: `s(z_t, t, condition) ~ grad_z log p_t(z)` together with
//! input vector-Jacobian products.
//!
//! Every model works on a batch of latent rows at a single diffusion time.
//! The latent coordinates are the tokens that are *not* conditioned on, in
//! token order.

mod analytic;
mod net;
mod train;

pub use analytic::AnalyticGmmScore;
pub use net::{MaskedScoreNet, NetConfig, Standardization};
pub use train::{
    dsm_loss, dsm_loss_from_scores, train_score_net, DsmTrainConfig, MaskKind, MaskSampler,
    TrainingLog,
};

use ndarray::{Array2, ArrayView2};

use crate::error::{check_len, Error, Result};
use crate::schedule::NoiseSchedule;

/// Which tokens are observed, and their (model-space) values.
///
/// `mask[i] == true` marks token `i` as conditioned. Values at latent positions
/// are ignored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    mask: Vec<bool>,
    values: Vec<f64>,
}

impl Condition {
    /// No tokens at all: used by models whose conditioning is baked in.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(mask: Vec<bool>, values: Vec<f64>) -> Result<Self> {
        check_len(mask.len(), values.len(), "condition values")?;
        Ok(Self { mask, values })
    }

    /// Condition on the tokens in `observed`, with every other token latent.
    pub fn from_observed(n_tokens: usize, observed: &[(usize, f64)]) -> Result<Self> {
        let mut mask = vec![false; n_tokens];
        let mut values = vec![0.0; n_tokens];
        for &(i, v) in observed {
            if i >= n_tokens {
                return Err(Error::Domain(format!("token {i} out of range {n_tokens}")));
            }
            mask[i] = true;
            values[i] = v;
        }
        Ok(Self { mask, values })
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_tokens(&self) -> usize {
        self.mask.len()
    }

    pub fn n_latent(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    /// Token index of each latent coordinate.
    pub fn latent_tokens(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// Linearization of a score model at a batch of points.
pub trait ScorePullback {
    /// Row-wise `v^T (d s / d z)` at the linearization points.
    fn vjp(&self, v: ArrayView2<f64>) -> Result<Array2<f64>>;
}

pub trait ScoreModel: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Number of latent coordinates under `cond`.
    fn latent_dim(&self, cond: &Condition) -> Result<usize>;

    fn score(&self, z: ArrayView2<f64>, t: f64, cond: &Condition) -> Result<Array2<f64>>;

    /// Score at `z` plus a pullback for vector-Jacobian products at the same
    /// points, sharing one forward pass.
    fn linearize<'a>(
        &'a self,
        z: ArrayView2<'a, f64>,
        t: f64,
        cond: &'a Condition,
    ) -> Result<(Array2<f64>, Box<dyn ScorePullback + 'a>)>;

    fn vjp(
        &self,
        v: ArrayView2<f64>,
        z: ArrayView2<f64>,
        t: f64,
        cond: &Condition,
    ) -> Result<Array2<f64>> {
        let (_, pullback) = self.linearize(z, t, cond)?;
        pullback.vjp(v)
    }
}

pub(crate) fn check_batch(z: &ArrayView2<f64>, dim: usize, context: &'static str) -> Result<()> {
    check_len(dim, z.ncols(), context)
}

/// Wraps a model and counts forward evaluations (batched calls).
pub struct CountingModel<'m, M: ?Sized> {
    inner: &'m M,
    calls: std::sync::atomic::AtomicUsize,
}

impl<'m, M: ScoreModel + ?Sized> CountingModel<'m, M> {
    pub fn new(inner: &'m M) -> Self {
        Self {
            inner,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::Relaxed)
    }

    fn bump(&self) {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for CountingModel<'_, M> {
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }

    fn latent_dim(&self, cond: &Condition) -> Result<usize> {
        self.inner.latent_dim(cond)
    }

    fn score(&self, z: ArrayView2<f64>, t: f64, cond: &Condition) -> Result<Array2<f64>> {
        self.bump();
        self.inner.score(z, t, cond)
    }

    fn linearize<'a>(
        &'a self,
        z: ArrayView2<'a, f64>,
        t: f64,
        cond: &'a Condition,
    ) -> Result<(Array2<f64>, Box<dyn ScorePullback + 'a>)> {
        self.bump();
        self.inner.linearize(z, t, cond)
    }
}
