//! Masked conditional feed-forward score network.
//!
//! Input row layout (length `2 T + 2 F` for `T` tokens and `F` frequencies):
//!
//! ```text
//! [ token values (theta then x) | condition mask (1 = observed) | sin(2 pi w t) | cos(2 pi w t) ]
//! ```
//!
//! Latent token values enter scaled by `1 / sqrt(1 + sigma^2)`; observed tokens
//! enter clean. The body is an MLP with SiLU activations whose raw output `F`
//! is turned into a score by
//!
//! ```text
//! s = -z / (1 + sigma^2) + F / (max(sigma, sigma_floor) * sqrt(1 + sigma^2))
//! ```
//!
//! at latent positions and zero at observed ones. A zero output layer therefore
//! starts from the score of a standard normal in standardized space.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_batch, Condition, ScoreModel, ScorePullback};
use crate::error::{check_len, Error, Result};
use crate::schedule::{check_time, NoiseSchedule};

const MAGIC: &[u8; 8] = b"PGSNET\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_theta: usize,
    pub n_x: usize,
    pub hidden: Vec<usize>,
    /// Number of Fourier frequencies; the time embedding has twice this length.
    pub n_freq: usize,
    /// Standard deviation of the Fourier frequencies.
    pub freq_scale: f64,
    pub sigma_floor: f64,
    pub schedule: NoiseSchedule,
}

impl NetConfig {
    pub fn new(n_theta: usize, n_x: usize) -> Self {
        Self {
            n_theta,
            n_x,
            hidden: vec![256, 256, 256],
            n_freq: 64,
            freq_scale: 1.0,
            sigma_floor: 0.05,
            schedule: NoiseSchedule::default(),
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn n_tokens(&self) -> usize {
        self.n_theta + self.n_x
    }
}

/// Per-token affine standardization `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Column statistics of `rows`; constant columns get unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Domain("cannot standardize an empty data set".into()));
        }
        let (mean, mut std) = crate::util::column_stats(rows);
        for s in &mut std {
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn forward(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn inverse(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }

    /// Restriction to a subset of tokens.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            mean: idx.iter().map(|&i| self.mean[i]).collect(),
            std: idx.iter().map(|&i| self.std[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    /// Shape `(in, out)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedScoreNet {
    n_theta: usize,
    n_x: usize,
    schedule: NoiseSchedule,
    sigma_floor: f64,
    freqs: Vec<f64>,
    standardization: Standardization,
    pub(crate) layers: Vec<Layer>,
}

/// Forward-pass intermediates needed for reverse mode.
pub(crate) struct Tape {
    /// Layer inputs: `inputs[0]` is the network input row block.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    pub c_in: Array1<f64>,
    pub c_out: Array1<f64>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let sg = 1.0 / (1.0 + (-x).exp());
    sg * (1.0 + x * (1.0 - sg))
}

impl MaskedScoreNet {
    /// Random hidden layers, zero output layer.
    pub fn new<R: Rng + ?Sized>(
        cfg: &NetConfig,
        standardization: Standardization,
        rng: &mut R,
    ) -> Result<Self> {
        let n_tokens = cfg.n_tokens();
        if n_tokens == 0 {
            return Err(Error::Domain("network needs at least one token".into()));
        }
        check_len(n_tokens, standardization.len(), "standardization statistics")?;
        if cfg.hidden.iter().any(|h| *h == 0) {
            return Err(Error::Domain("hidden widths must be positive".into()));
        }
        if !(cfg.sigma_floor > 0.0) || !(cfg.freq_scale > 0.0) {
            return Err(Error::Domain("sigma_floor and freq_scale must be positive".into()));
        }
        let freq_dist = Normal::new(0.0, cfg.freq_scale)
            .map_err(|e| Error::Domain(format!("frequency scale: {e}")))?;
        let freqs: Vec<f64> = (0..cfg.n_freq).map(|_| freq_dist.sample(rng)).collect();

        let mut widths = vec![2 * n_tokens + 2 * cfg.n_freq];
        widths.extend(&cfg.hidden);
        widths.push(n_tokens);
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let w = if l + 1 == n_layers {
                Array2::zeros((fan_in, fan_out))
            } else {
                let d = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
                Array2::from_shape_simple_fn((fan_in, fan_out), || d.sample(rng))
            };
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Ok(Self {
            n_theta: cfg.n_theta,
            n_x: cfg.n_x,
            schedule: cfg.schedule,
            sigma_floor: cfg.sigma_floor,
            freqs,
            standardization,
            layers,
        })
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_tokens(&self) -> usize {
        self.n_theta + self.n_x
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    pub fn input_dim(&self) -> usize {
        2 * self.n_tokens() + 2 * self.freqs.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Token-space rows `values` (standardized) with per-row masks and times.
    /// Returns the score at every token (zero where `mask == 1`) and the tape.
    pub(crate) fn forward(
        &self,
        values: ArrayView2<f64>,
        mask: ArrayView2<f64>,
        t: &[f64],
    ) -> (Array2<f64>, Tape) {
        let (n, nt) = values.dim();
        let nf = self.freqs.len();
        let mut x = Array2::zeros((n, self.input_dim()));
        let mut c_in = Array1::zeros(n);
        let mut c_out = Array1::zeros(n);
        let mut sig2 = Array1::zeros(n);
        for b in 0..n {
            let sigma = self.schedule.sigma(t[b]);
            let s2 = sigma * sigma;
            sig2[b] = s2;
            c_in[b] = 1.0 / (1.0 + s2).sqrt();
            c_out[b] = 1.0 / (sigma.max(self.sigma_floor) * (1.0 + s2).sqrt());
            let mut row = x.row_mut(b);
            for i in 0..nt {
                let m = mask[[b, i]];
                row[i] = if m > 0.5 { values[[b, i]] } else { c_in[b] * values[[b, i]] };
                row[nt + i] = m;
            }
            for (k, w) in self.freqs.iter().enumerate() {
                let a = std::f64::consts::TAU * w * t[b];
                row[2 * nt + k] = a.sin();
                row[2 * nt + nf + k] = a.cos();
            }
        }

        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = h.dot(&layer.w);
            a += &layer.b;
            inputs.push(h);
            if l + 1 < n_layers {
                let act = a.mapv(silu);
                pre.push(a);
                h = act;
            } else {
                h = a;
            }
        }
        let mut out = h;
        for b in 0..n {
            for i in 0..nt {
                out[[b, i]] = if mask[[b, i]] > 0.5 {
                    0.0
                } else {
                    -values[[b, i]] / (1.0 + sig2[b]) + c_out[b] * out[[b, i]]
                };
            }
        }
        (
            out,
            Tape {
                inputs,
                pre,
                c_in,
                c_out,
            },
        )
    }

    /// Reverse pass from `g_raw = dL/dF` (raw output). Accumulates parameter
    /// gradients into `grads` when given and returns `dL/d(network input)`.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        g_raw: Array2<f64>,
        mut grads: Option<&mut [Layer]>,
        need_input: bool,
    ) -> Option<Array2<f64>> {
        let n_layers = self.layers.len();
        let mut g = g_raw;
        for l in (0..n_layers).rev() {
            if let Some(gr) = grads.as_deref_mut() {
                gr[l].w += &tape.inputs[l].t().dot(&g);
                gr[l].b += &g.sum_axis(Axis(0));
            }
            if l == 0 && !need_input {
                return None;
            }
            let mut gin = g.dot(&self.layers[l].w.t());
            if l > 0 {
                ndarray::Zip::from(&mut gin)
                    .and(&tape.pre[l - 1])
                    .for_each(|gi, &a| *gi *= silu_grad(a));
            }
            g = gin;
        }
        Some(g)
    }

    pub(crate) fn zero_grads(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer {
                w: Array2::zeros(l.w.raw_dim()),
                b: Array1::zeros(l.b.len()),
            })
            .collect()
    }

    /// Expands latent rows into full token rows with masks.
    fn assemble(&self, z: &ArrayView2<f64>, cond: &Condition) -> Result<(Array2<f64>, Array2<f64>)> {
        let nt = self.n_tokens();
        let n = z.nrows();
        if cond.is_empty() {
            check_batch(z, nt, "network latent input")?;
            return Ok((z.to_owned(), Array2::zeros((n, nt))));
        }
        check_len(nt, cond.n_tokens(), "condition tokens")?;
        check_batch(z, cond.n_latent(), "network latent input")?;
        let mut values = Array2::zeros((n, nt));
        let mut mask = Array2::zeros((n, nt));
        for b in 0..n {
            let mut j = 0;
            for i in 0..nt {
                if cond.mask()[i] {
                    values[[b, i]] = cond.values()[i];
                    mask[[b, i]] = 1.0;
                } else {
                    values[[b, i]] = z[[b, j]];
                    j += 1;
                }
            }
        }
        Ok((values, mask))
    }

    fn latent_index(&self, cond: &Condition) -> Vec<usize> {
        if cond.is_empty() {
            (0..self.n_tokens()).collect()
        } else {
            cond.latent_tokens()
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Little-endian layout:
    ///
    /// ```text
    /// magic[8] "PGSNET\0\0" | version u32 | n_theta u32 | n_x u32 | n_layers u32
    /// | (in u32, out u32) * n_layers | sigma_min f64 | sigma_max f64 | sigma_floor f64
    /// | mean f64 * T | std f64 * T | n_freq u32 | freqs f64 * n_freq
    /// | for each layer: W f64 * (in*out) row-major, b f64 * out
    /// ```
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let u32_of = |v: usize| -> Result<[u8; 4]> {
            u32::try_from(v)
                .map(u32::to_le_bytes)
                .map_err(|_| Error::Checkpoint(format!("dimension {v} exceeds u32")))
        };
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32_of(self.n_theta)?)?;
        w.write_all(&u32_of(self.n_x)?)?;
        w.write_all(&u32_of(self.layers.len())?)?;
        for l in &self.layers {
            w.write_all(&u32_of(l.w.nrows())?)?;
            w.write_all(&u32_of(l.w.ncols())?)?;
        }
        for v in [
            self.schedule.sigma_min(),
            self.schedule.sigma_max(),
            self.sigma_floor,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.standardization.mean.iter().chain(&self.standardization.std) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&u32_of(self.freqs.len())?)?;
        for v in &self.freqs {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.w.iter().chain(l.b.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        fn u32_le<R: Read>(r: &mut R) -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
            Ok(u32::from_le_bytes(b) as usize)
        }
        fn f64_le<R: Read>(r: &mut R) -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| Error::Checkpoint(format!("truncated data: {e}")))?;
            Ok(f64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("missing magic: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32_le(r)? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_theta = u32_le(r)?;
        let n_x = u32_le(r)?;
        let n_layers = u32_le(r)?;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            shapes.push((u32_le(r)?, u32_le(r)?));
        }
        let sigma_min = f64_le(r)?;
        let sigma_max = f64_le(r)?;
        let sigma_floor = f64_le(r)?;
        let schedule = NoiseSchedule::new(sigma_min, sigma_max)
            .map_err(|e| Error::Checkpoint(format!("schedule: {e}")))?;
        let nt = n_theta + n_x;
        let mean = (0..nt).map(|_| f64_le(r)).collect::<Result<Vec<_>>>()?;
        let std = (0..nt).map(|_| f64_le(r)).collect::<Result<Vec<_>>>()?;
        let n_freq = u32_le(r)?;
        let freqs = (0..n_freq).map(|_| f64_le(r)).collect::<Result<Vec<_>>>()?;

        let mut expected_in = 2 * nt + 2 * n_freq;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, &(fi, fo)) in shapes.iter().enumerate() {
            if fi != expected_in || (l + 1 == n_layers && fo != nt) {
                return Err(Error::Checkpoint(format!("inconsistent shape for layer {l}")));
            }
            let w = (0..fi * fo).map(|_| f64_le(r)).collect::<Result<Vec<_>>>()?;
            let b = (0..fo).map(|_| f64_le(r)).collect::<Result<Vec<_>>>()?;
            layers.push(Layer {
                w: Array2::from_shape_vec((fi, fo), w).expect("length checked"),
                b: Array1::from(b),
            });
            expected_in = fo;
        }
        Ok(Self {
            n_theta,
            n_x,
            schedule,
            sigma_floor,
            freqs,
            standardization: Standardization { mean, std },
            layers,
        })
    }
}

struct NetPullback<'a> {
    net: &'a MaskedScoreNet,
    tape: Tape,
    mask: Array2<f64>,
    latent: Vec<usize>,
    sig2: f64,
}

impl ScorePullback for NetPullback<'_> {
    fn vjp(&self, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.mask.nrows();
        check_len(n, v.nrows(), "vjp batch")?;
        check_len(self.latent.len(), v.ncols(), "vjp cotangent")?;
        let nt = self.net.n_tokens();
        // dL/dF at latent tokens: v * c_out.
        let mut g = Array2::zeros((n, nt));
        for b in 0..n {
            for (j, &i) in self.latent.iter().enumerate() {
                g[[b, i]] = v[[b, j]] * self.tape.c_out[b];
            }
        }
        let gin = self
            .net
            .backward(&self.tape, g, None, true)
            .expect("input gradient requested");
        let mut out = Array2::zeros(v.raw_dim());
        for b in 0..n {
            for (j, &i) in self.latent.iter().enumerate() {
                out[[b, j]] = -v[[b, j]] / (1.0 + self.sig2) + self.tape.c_in[b] * gin[[b, i]];
            }
        }
        Ok(out)
    }
}

impl ScoreModel for MaskedScoreNet {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_dim(&self, cond: &Condition) -> Result<usize> {
        if cond.is_empty() {
            return Ok(self.n_tokens());
        }
        check_len(self.n_tokens(), cond.n_tokens(), "condition tokens")?;
        Ok(cond.n_latent())
    }

    fn score(&self, z: ArrayView2<f64>, t: f64, cond: &Condition) -> Result<Array2<f64>> {
        check_time(t)?;
        let (values, mask) = self.assemble(&z, cond)?;
        let ts = vec![t; z.nrows()];
        let (full, _) = self.forward(values.view(), mask.view(), &ts);
        let latent = self.latent_index(cond);
        Ok(full.select(Axis(1), &latent))
    }

    fn linearize<'a>(
        &'a self,
        z: ArrayView2<'a, f64>,
        t: f64,
        cond: &'a Condition,
    ) -> Result<(Array2<f64>, Box<dyn ScorePullback + 'a>)> {
        check_time(t)?;
        let (values, mask) = self.assemble(&z, cond)?;
        let ts = vec![t; z.nrows()];
        let (full, tape) = self.forward(values.view(), mask.view(), &ts);
        let latent = self.latent_index(cond);
        let scores = full.select(Axis(1), &latent);
        let sig2 = self.schedule.sigma(t).powi(2);
        Ok((
            scores,
            Box::new(NetPullback {
                net: self,
                tape,
                mask,
                latent,
                sig2,
            }),
        ))
    }
}


#[cfg(test)]
pub(crate) use tests::random_net;
