//! Denoising score matching for [`MaskedScoreNet`].
//!
//! Loss per row: `sum over latent tokens of sigma^2 * (s_i - target_i)^2` with
//! `target = -(z_t - z_0) / sigma^2`, i.e. `(sigma * s_i + eps_i)^2`, averaged
//! over the batch. Observed tokens keep their clean values and are excluded.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::net::{Layer, MaskedScoreNet};
use crate::error::{check_len, Error, Result};
use crate::util::rng_stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskKind {
    /// Nothing observed.
    Joint,
    /// Every x token observed.
    Posterior,
    /// Every theta token observed.
    Likelihood,
    /// Each token observed independently with probability `p`, per row.
    Bernoulli { p: f64 },
    /// A fixed pattern (`true` = observed).
    Fixed { observed: Vec<bool> },
}

impl MaskKind {
    fn fill<R: Rng + ?Sized>(&self, row: &mut [f64], n_theta: usize, rng: &mut R) {
        match self {
            MaskKind::Joint => row.fill(0.0),
            MaskKind::Posterior => {
                for (i, m) in row.iter_mut().enumerate() {
                    *m = if i >= n_theta { 1.0 } else { 0.0 };
                }
            }
            MaskKind::Likelihood => {
                for (i, m) in row.iter_mut().enumerate() {
                    *m = if i < n_theta { 1.0 } else { 0.0 };
                }
            }
            MaskKind::Bernoulli { p } => {
                for m in row.iter_mut() {
                    *m = if rng.random::<f64>() < *p { 1.0 } else { 0.0 };
                }
            }
            MaskKind::Fixed { observed } => {
                for (m, o) in row.iter_mut().zip(observed) {
                    *m = if *o { 1.0 } else { 0.0 };
                }
            }
        }
        // Every row needs something to denoise.
        if row.iter().all(|m| *m > 0.5) {
            let i = rng.random_range(0..row.len());
            row[i] = 0.0;
        }
    }
}

/// Draws one mask kind uniformly per batch from `menu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSampler {
    pub menu: Vec<MaskKind>,
}

impl Default for MaskSampler {
    fn default() -> Self {
        Self {
            menu: vec![
                MaskKind::Joint,
                MaskKind::Posterior,
                MaskKind::Likelihood,
                MaskKind::Bernoulli { p: 0.3 },
                MaskKind::Bernoulli { p: 0.7 },
            ],
        }
    }
}

impl MaskSampler {
    pub fn new(menu: Vec<MaskKind>) -> Result<Self> {
        if menu.is_empty() {
            return Err(Error::Domain("mask menu is empty".into()));
        }
        for m in &menu {
            if let MaskKind::Bernoulli { p } = m {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Domain(format!("bernoulli mask p={p} outside [0,1]")));
                }
            }
        }
        Ok(Self { menu })
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n_rows: usize,
        n_theta: usize,
        n_x: usize,
    ) -> Result<Array2<f64>> {
        let kind = &self.menu[rng.random_range(0..self.menu.len())];
        if let MaskKind::Fixed { observed } = kind {
            check_len(n_theta + n_x, observed.len(), "fixed mask")?;
        }
        let mut mask = Array2::zeros((n_rows, n_theta + n_x));
        for mut row in mask.rows_mut() {
            kind.fill(row.as_slice_mut().expect("contiguous row"), n_theta, rng);
        }
        Ok(mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsmTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    /// Fraction of `max_steps` after which the learning rate decays linearly.
    pub decay_start: f64,
    pub max_steps: usize,
    pub min_steps: usize,
    /// Number of consecutive evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub val_fraction: f64,
    /// `t ~ U[t_lo, t_hi]`.
    pub t_lo: f64,
    pub t_hi: f64,
    pub clip_norm: f64,
    /// Decay of the weight moving average that is validated and returned;
    /// 0 disables averaging.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for DsmTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            lr: 1e-3,
            lr_final: 1e-6,
            decay_start: 0.5,
            max_steps: 100_000,
            min_steps: 5_000,
            patience: 10,
            eval_every: 250,
            val_fraction: 0.1,
            t_lo: 1e-5,
            t_hi: 1.0,
            clip_norm: 10.0,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl DsmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.min_steps > self.max_steps {
            return Err(Error::Config("min_steps must not exceed max_steps".into()));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr) {
            return Err(Error::Config("need 0 < lr_final <= lr".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_start) {
            return Err(Error::Config("decay_start must lie in [0, 1]".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if !(0.0 <= self.t_lo && self.t_lo < self.t_hi && self.t_hi <= 1.0) {
            return Err(Error::Config("need 0 <= t_lo < t_hi <= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        if self.eval_every == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::Config("eval_every and clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let start = self.decay_start * self.max_steps as f64;
        let s = step as f64;
        if s <= start || self.max_steps == 0 {
            return self.lr;
        }
        let frac = ((s - start) / (self.max_steps as f64 - start).max(1.0)).min(1.0);
        self.lr + (self.lr_final - self.lr) * frac
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: usize,
    pub eval_steps: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// DSM loss from precomputed scores at every token (zeros at observed ones).
pub fn dsm_loss_from_scores(
    scores: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    z_0: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    sigmas: &[f64],
) -> Result<f64> {
    let n = scores.nrows();
    if n == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    check_len(n, sigmas.len(), "dsm sigmas")?;
    for a in [&z_t, &z_0, &mask] {
        check_len(n, a.nrows(), "dsm batch rows")?;
        check_len(scores.ncols(), a.ncols(), "dsm tokens")?;
    }
    let mut total = 0.0;
    for b in 0..n {
        let s2 = sigmas[b] * sigmas[b];
        for i in 0..scores.ncols() {
            if mask[[b, i]] > 0.5 {
                continue;
            }
            let target = -(z_t[[b, i]] - z_0[[b, i]]) / s2;
            let d = scores[[b, i]] - target;
            total += s2 * d * d;
        }
    }
    Ok(total / n as f64)
}

/// DSM loss of `net` on standardized clean rows `z_0` with explicit masks,
/// times and noise draws.
pub fn dsm_loss(
    net: &MaskedScoreNet,
    z_0: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    t: &[f64],
    noise: ArrayView2<f64>,
) -> Result<f64> {
    Ok(loss_and_raw_grad(net, z_0, mask, t, noise, false)?.0)
}

/// Loss plus `dL/dF` at the raw network output when `with_grad`.
fn loss_and_raw_grad(
    net: &MaskedScoreNet,
    z_0: ArrayView2<f64>,
    mask: ArrayView2<f64>,
    t: &[f64],
    noise: ArrayView2<f64>,
    with_grad: bool,
) -> Result<(f64, Option<(Array2<f64>, super::net::Tape)>)> {
    let n = z_0.nrows();
    if n == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let nt = net.n_tokens();
    check_len(nt, z_0.ncols(), "dsm tokens")?;
    for a in [&mask, &noise] {
        check_len(n, a.nrows(), "dsm batch rows")?;
        check_len(nt, a.ncols(), "dsm tokens")?;
    }
    check_len(n, t.len(), "dsm times")?;
    let sched = *crate::score::ScoreModel::schedule(net);
    let sigmas: Vec<f64> = t.iter().map(|&ti| sched.sigma(ti)).collect();
    let mut z_t = z_0.to_owned();
    for b in 0..n {
        for i in 0..nt {
            if mask[[b, i]] < 0.5 {
                z_t[[b, i]] += sigmas[b] * noise[[b, i]];
            }
        }
    }
    let (scores, tape) = net.forward(z_t.view(), mask, t);
    let mut total = 0.0;
    let mut g = with_grad.then(|| Array2::zeros((n, nt)));
    for b in 0..n {
        for i in 0..nt {
            if mask[[b, i]] > 0.5 {
                continue;
            }
            let r = sigmas[b] * scores[[b, i]] + noise[[b, i]];
            total += r * r;
            if let Some(g) = g.as_mut() {
                g[[b, i]] = 2.0 * r * sigmas[b] * tape.c_out[b] / n as f64;
            }
        }
    }
    Ok((total / n as f64, g.map(|g| (g, tape))))
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &MaskedScoreNet) -> Self {
        Self {
            m: net.zero_grads(),
            v: net.zero_grads(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut MaskedScoreNet, grads: &[Layer], lr: f64, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        };
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[l], &mut self.v[l]);
            upd(
                layer.w.as_slice_mut().expect("contiguous"),
                grads[l].w.as_slice().expect("contiguous"),
                m.w.as_slice_mut().expect("contiguous"),
                v.w.as_slice_mut().expect("contiguous"),
            );
            upd(
                layer.b.as_slice_mut().expect("contiguous"),
                grads[l].b.as_slice().expect("contiguous"),
                m.b.as_slice_mut().expect("contiguous"),
                v.b.as_slice_mut().expect("contiguous"),
            );
        }
    }
}

fn grad_norm(grads: &[Layer]) -> f64 {
    grads
        .iter()
        .map(|l| l.w.iter().chain(l.b.iter()).map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

struct Draws {
    z0: Array2<f64>,
    mask: Array2<f64>,
    t: Vec<f64>,
    noise: Array2<f64>,
}

fn draw_batch<R: Rng + ?Sized>(
    rows: &Array2<f64>,
    idx: &[usize],
    net: &MaskedScoreNet,
    cfg: &DsmTrainConfig,
    masks: &MaskSampler,
    rng: &mut R,
) -> Result<Draws> {
    let n = idx.len();
    let nt = net.n_tokens();
    let z0 = rows.select(Axis(0), idx);
    let mask = masks.sample(rng, n, net.n_theta(), net.n_x())?;
    let t = (0..n)
        .map(|_| rng.random_range(cfg.t_lo..=cfg.t_hi))
        .collect();
    let noise = Array2::from_shape_simple_fn((n, nt), || StandardNormal.sample(rng));
    Ok(Draws { z0, mask, t, noise })
}

/// Trains `net` on raw `(theta, x)` rows. Rows are standardized with the
/// statistics stored in `net`. Returns the best checkpoint by validation loss.
pub fn train_score_net(
    net: MaskedScoreNet,
    data: &[Vec<f64>],
    cfg: &DsmTrainConfig,
    masks: &MaskSampler,
) -> Result<(MaskedScoreNet, TrainingLog)> {
    cfg.validate()?;
    if cfg.max_steps == 0 {
        return Ok((net, TrainingLog::default()));
    }
    let nt = net.n_tokens();
    if data.len() < 2 {
        return Err(Error::Domain("need at least two training rows".into()));
    }
    let mut rows = Array2::zeros((data.len(), nt));
    for (b, r) in data.iter().enumerate() {
        check_len(nt, r.len(), "training row")?;
        let z = net.standardization().forward(r);
        rows.row_mut(b).assign(&ndarray::ArrayView1::from(&z));
    }

    let mut rng = rng_stream(cfg.seed, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = train_idx.to_vec();

    // Fixed validation draws so that successive evaluations are comparable.
    let mut val_rng = rng_stream(cfg.seed, 1);
    let val_chunks: Vec<Draws> = val_idx
        .chunks(cfg.batch_size.max(256))
        .map(|c| draw_batch(&rows, c, &net, cfg, masks, &mut val_rng))
        .collect::<Result<_>>()?;
    let val_loss = |net: &MaskedScoreNet| -> Result<f64> {
        let mut acc = 0.0;
        for d in &val_chunks {
            let l = dsm_loss(net, d.z0.view(), d.mask.view(), &d.t, d.noise.view())?;
            acc += l * d.z0.nrows() as f64;
        }
        Ok(acc / n_val as f64)
    };

    let mut net = net;
    let mut ema = net.clone();
    let mut best = net.clone();
    let mut log = TrainingLog {
        best_val_loss: val_loss(&net)?,
        ..TrainingLog::default()
    };
    let mut adam = Adam::new(&net);
    let mut cursor = train_idx.len();
    let mut perm = train_idx.clone();
    let mut running = 0.0;
    let mut running_n = 0usize;
    let mut stale = 0usize;
    let bs = cfg.batch_size.min(train_idx.len());

    for step in 1..=cfg.max_steps {
        if cursor + bs > perm.len() {
            perm.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &perm[cursor..cursor + bs];
        cursor += bs;
        let d = draw_batch(&rows, idx, &net, cfg, masks, &mut rng)?;
        let (loss, gt) = loss_and_raw_grad(&net, d.z0.view(), d.mask.view(), &d.t, d.noise.view(), true)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("non-finite training loss {loss}"),
                checkpoint: Box::new(best),
            });
        }
        let (g_raw, tape) = gt.expect("gradient requested");
        let mut grads = net.zero_grads();
        net.backward(&tape, g_raw, Some(&mut grads), false);
        let norm = grad_norm(&grads);
        let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        adam.step(&mut net, &grads, cfg.learning_rate(step), scale);
        // warm-up keeps early averages from being dominated by the init
        let decay = cfg.ema_decay.min((1 + step) as f64 / (10 + step) as f64);
        for (e, l) in ema.layers.iter_mut().zip(&net.layers) {
            e.w.zip_mut_with(&l.w, |a, b| *a = decay * *a + (1.0 - decay) * b);
            e.b.zip_mut_with(&l.b, |a, b| *a = decay * *a + (1.0 - decay) * b);
        }
        running += loss;
        running_n += 1;
        log.steps = step;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let v = val_loss(&ema)?;
            if !v.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite validation loss {v}"),
                    checkpoint: Box::new(best),
                });
            }
            log.eval_steps.push(step);
            log.train_loss.push(running / running_n as f64);
            log.val_loss.push(v);
            running = 0.0;
            running_n = 0;
            if v < log.best_val_loss {
                log.best_val_loss = v;
                log.best_step = step;
                best = ema.clone();
                stale = 0;
            } else {
                stale += 1;
            }
            if step >= cfg.min_steps && stale >= cfg.patience {
                log.stopped_early = step < cfg.max_steps;
                break;
            }
        }
    }
    Ok((best, log))
}
