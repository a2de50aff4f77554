//! Guided reverse-SDE samplers: posterior over theta and posterior predictive
//! over unobserved data tokens.
//!
//! Each grid step `k` runs `n_langevin` corrector updates at `t_k` (using the
//! step size `dt_k` of the upcoming predictor), then one Euler–Maruyama update.
//! Every update evaluates the (guided) score once on the whole batch of chains,
//! so one run costs `n_steps * (n_langevin + 1)` model calls.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::guidance::{guidance_term, GuidanceConfig};
use crate::prior::RatioGmm;
use crate::schedule::{euler_maruyama_step_in_place, langevin_step_in_place, TimeGrid};
use crate::score::{Condition, CountingModel, MaskedScoreNet, ScoreModel, Standardization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub n_langevin: usize,
    pub eta: f64,
    pub rho: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub n_samples: usize,
    pub guidance: GuidanceConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 25,
            n_langevin: 8,
            eta: 0.5,
            rho: 2.0,
            t_min: 1e-10,
            t_max: 1.0,
            n_samples: 1000,
            guidance: GuidanceConfig::default(),
        }
    }
}

impl SamplerConfig {
    /// Long predictor-only schedule.
    pub fn predictor_only(n_steps: usize) -> Self {
        Self {
            n_steps,
            n_langevin: 0,
            ..Self::default()
        }
    }

    pub fn nfe(&self) -> usize {
        self.n_steps * (self.n_langevin + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if self.n_langevin > 0 && !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        TimeGrid::new(self.n_steps, self.rho, self.t_min, self.t_max)?;
        Ok(())
    }
}

/// The latent sampling problem in the model's coordinates, with the map
/// back to user coordinates.
#[derive(Debug, Clone)]
pub struct Problem {
    pub cond: Condition,
    /// Latent coordinates the ratio acts on.
    pub theta_index: Vec<usize>,
    /// Latent coordinates returned to the caller.
    pub output_index: Vec<usize>,
    /// Ratio in model coordinates; `None` samples without guidance.
    pub ratio: Option<RatioGmm>,
    /// Model-to-user map for the output coordinates: `v * std + mean`.
    pub output_map: Standardization,
}

impl Problem {
    /// Unconditioned model over theta alone (analytic scores).
    pub fn direct(dim: usize, ratio: Option<RatioGmm>) -> Result<Self> {
        if let Some(r) = &ratio {
            check_len(dim, r.dim(), "ratio dimension")?;
        }
        Ok(Self {
            cond: Condition::none(),
            theta_index: (0..dim).collect(),
            output_index: (0..dim).collect(),
            ratio,
            output_map: Standardization::identity(dim),
        })
    }

    /// Posterior over theta given the full raw observation `x_obs`.
    pub fn net_posterior(net: &MaskedScoreNet, x_obs: &[f64], ratio: Option<&RatioGmm>) -> Result<Self> {
        let observed: Vec<(usize, f64)> = x_obs.iter().copied().enumerate().collect();
        check_len(net.n_x(), x_obs.len(), "observation")?;
        let mut p = Self::net_predictive(net, &observed, ratio)?;
        p.output_index = (0..net.n_theta()).collect();
        p.output_map = net.standardization().select(&p.output_index);
        Ok(p)
    }

    /// Joint latent over theta and the unobserved x tokens. `observed` holds
    /// `(x index, raw value)` pairs. Outputs are the unobserved x tokens.
    pub fn net_predictive(
        net: &MaskedScoreNet,
        observed: &[(usize, f64)],
        ratio: Option<&RatioGmm>,
    ) -> Result<Self> {
        let nth = net.n_theta();
        let st = net.standardization();
        let mut tokens = Vec::with_capacity(observed.len());
        for &(i, v) in observed {
            if i >= net.n_x() {
                return Err(Error::Domain(format!("x index {i} out of range {}", net.n_x())));
            }
            let tok = nth + i;
            tokens.push((tok, (v - st.mean[tok]) / st.std[tok]));
        }
        let cond = Condition::from_observed(net.n_tokens(), &tokens)?;
        let latent = cond.latent_tokens();
        // Theta tokens are never observed here, so they lead the latent vector.
        let theta_index: Vec<usize> = (0..nth).collect();
        let output_index: Vec<usize> = (nth..latent.len()).collect();
        let out_tokens: Vec<usize> = output_index.iter().map(|&j| latent[j]).collect();
        let ratio = match ratio {
            Some(r) => {
                check_len(nth, r.dim(), "ratio dimension")?;
                Some(r.pull_back(&st.mean[..nth], &st.std[..nth])?)
            }
            None => None,
        };
        Ok(Self {
            cond,
            theta_index,
            output_index,
            ratio,
            output_map: st.select(&out_tokens),
        })
    }
}

/// Samples plus the metadata needed to trace them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// `(n_samples, dim)` in user coordinates.
    pub samples: Array2<f64>,
    /// Model calls per chain.
    pub nfe: usize,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl SampleSet {
    pub fn empty(n: usize) -> Self {
        Self {
            samples: Array2::zeros((n, 0)),
            nfe: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.samples.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes `<path>` as CSV with a `sample_id,v0,v1,...` header and
    /// `<path>.json` (extension replaced) with the metadata.
    pub fn save(&self, path: impl AsRef<Path>, column_prefix: &str) -> Result<()> {
        let path = path.as_ref();
        write_csv(path, self.samples.view(), column_prefix)?;
        let mut meta = self.meta.clone();
        meta.insert("nfe".into(), self.nfe.into());
        meta.insert("n_samples".into(), self.samples.nrows().into());
        meta.insert("dim".into(), self.samples.ncols().into());
        std::fs::write(Self::sidecar(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, mut samples) = read_csv(path)?;
        if header.first().map(String::as_str) == Some("sample_id") {
            samples = samples.slice(ndarray::s![.., 1..]).to_owned();
        }
        let mut meta: BTreeMap<String, serde_json::Value> =
            match std::fs::read_to_string(Self::sidecar(path)) {
                Ok(s) => serde_json::from_str(&s)?,
                Err(_) => BTreeMap::new(),
            };
        let nfe = meta.remove("nfe").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        meta.remove("n_samples");
        meta.remove("dim");
        Ok(Self { samples, nfe, meta })
    }
}

/// CSV with a leading `sample_id` column.
pub fn write_csv(path: &Path, rows: ArrayView2<f64>, column_prefix: &str) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("sample_id".to_string())
        .chain((0..rows.ncols()).map(|i| format!("{column_prefix}{i}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (i, r) in rows.rows().into_iter().enumerate() {
        let line: Vec<String> = std::iter::once(i.to_string())
            .chain(r.iter().map(|v| v.to_string()))
            .collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let mut data = Vec::new();
    let mut n = 0;
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), ln + 2)))?;
        if vals.len() != header.len() {
            return Err(Error::Parse(format!(
                "{} line {}: expected {} values, got {}",
                path.display(),
                ln + 2,
                header.len(),
                vals.len()
            )));
        }
        data.extend(vals);
        n += 1;
    }
    let arr = Array2::from_shape_vec((n, header.len()), data).expect("row lengths checked");
    Ok((header, arr))
}

fn fill_normal<R: Rng + ?Sized>(a: &mut Array2<f64>, rng: &mut R) {
    a.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
}

/// Runs the guided sampler on `problem` and returns the output coordinates
/// mapped back to user space.
pub fn priorguide_posterior<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    problem: &Problem,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleSet> {
    cfg.validate()?;
    if problem.output_index.is_empty() {
        return Ok(SampleSet::empty(cfg.n_samples));
    }
    let counter = CountingModel::new(model);
    let z = run_chains(&counter, problem, cfg, rng)?;
    let out = z.select(Axis(1), &problem.output_index);
    let mut samples = Array2::zeros(out.raw_dim());
    for (mut dst, src) in samples.rows_mut().into_iter().zip(out.rows()) {
        let v = problem.output_map.inverse(&src.to_vec());
        dst.assign(&ndarray::ArrayView1::from(&v));
    }
    Ok(SampleSet {
        samples,
        nfe: counter.calls(),
        meta: BTreeMap::new(),
    }
    .with_meta("n_steps", cfg.n_steps)
    .with_meta("n_langevin", cfg.n_langevin)
    .with_meta("guided", problem.ratio.is_some()))
}

/// Posterior predictive over the unobserved x tokens: identical dynamics on
/// the joint latent, returning only the x part.
pub fn priorguide_predictive<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    problem: &Problem,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleSet> {
    priorguide_posterior(model, problem, cfg, rng)
}

/// Final latent states in model coordinates, `(n_samples, d_latent)`.
pub fn run_chains<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    problem: &Problem,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let d = model.latent_dim(&problem.cond)?;
    let grid = TimeGrid::new(cfg.n_steps, cfg.rho, cfg.t_min, cfg.t_max)?;
    let sched = *model.schedule();
    let n = cfg.n_samples;
    let mut z = Array2::zeros((n, d));
    fill_normal(&mut z, rng);
    z *= sched.sigma(cfg.t_max);
    let mut noise = Array2::zeros((n, d));

    let score_at = |z: &Array2<f64>, t: f64, step: usize| -> Result<Array2<f64>> {
        let s = match &problem.ratio {
            None => model.score(z.view(), t, &problem.cond),
            Some(r) => guidance_term(
                model,
                r,
                z.view(),
                t,
                &problem.cond,
                &problem.theta_index,
                &cfg.guidance,
            )
            .map(|g| g.guided_score())
            .map_err(|e| match e {
                Error::GuidanceDegenerate { t, reason, .. } => Error::GuidanceDegenerate {
                    t,
                    step: Some(step),
                    reason,
                },
                other => other,
            }),
        }?;
        Ok(if s.is_standard_layout() { s } else { s.as_standard_layout().into_owned() })
    };

    for k in 0..cfg.n_steps {
        let (t, dt) = grid.step(k);
        for _ in 0..cfg.n_langevin {
            let s = score_at(&z, t, k)?;
            fill_normal(&mut noise, rng);
            for b in 0..n {
                langevin_step_in_place(
                    z.row_mut(b).into_slice().expect("contiguous"),
                    s.row(b).as_slice().expect("contiguous"),
                    &sched,
                    t,
                    dt,
                    cfg.eta,
                    noise.row(b).as_slice().expect("contiguous"),
                )?;
            }
        }
        let s = score_at(&z, t, k)?;
        fill_normal(&mut noise, rng);
        for b in 0..n {
            euler_maruyama_step_in_place(
                z.row_mut(b).into_slice().expect("contiguous"),
                s.row(b).as_slice().expect("contiguous"),
                &sched,
                t,
                dt,
                noise.row(b).as_slice().expect("contiguous"),
            )?;
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::GuidanceDegenerate {
            t: cfg.t_min,
            step: Some(cfg.n_steps),
            reason: "non-finite sampler state".into(),
        });
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use crate::score::AnalyticGmmScore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn nfe_accounting() {
        let m = AnalyticGmmScore::standard_normal(2, NoiseSchedule::default());
        let r = RatioGmm::new(vec![1.0], vec![vec![0.5, 0.0]], vec![vec![0.2, 0.2]]).unwrap();
        let p = Problem::direct(2, Some(r)).unwrap();
        let cfg = SamplerConfig {
            n_samples: 10,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let s = priorguide_posterior(&m, &p, &cfg, &mut rng).unwrap();
        assert_eq!(s.nfe, 225);
        assert_eq!(cfg.nfe(), 225);
        assert_eq!(s.samples.dim(), (10, 2));
    }

    #[test]
    fn deterministic_given_seed() {
        let m = AnalyticGmmScore::standard_normal(3, NoiseSchedule::default());
        let p = Problem::direct(3, None).unwrap();
        let cfg = SamplerConfig {
            n_samples: 20,
            n_steps: 5,
            n_langevin: 2,
            ..SamplerConfig::default()
        };
        let a = priorguide_posterior(&m, &p, &cfg, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = priorguide_posterior(&m, &p, &cfg, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_target_makes_no_calls() {
        let m = AnalyticGmmScore::standard_normal(2, NoiseSchedule::default());
        let mut p = Problem::direct(2, None).unwrap();
        p.output_index.clear();
        let s = priorguide_posterior(&m, &p, &SamplerConfig::default(), &mut ChaCha20Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(s.nfe, 0);
        assert_eq!(s.samples.ncols(), 0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let set = SampleSet {
            samples: ndarray::array![[0.1, -2.5e-7], [3.0, 1.0 / 3.0]],
            nfe: 7,
            meta: BTreeMap::new(),
        }
        .with_meta("prior_id", 2);
        set.save(&path, "theta_").unwrap();
        let back = SampleSet::load(&path).unwrap();
        assert_eq!(set, back);
        let (h, _) = read_csv(&path).unwrap();
        assert_eq!(h, vec!["sample_id", "theta_0", "theta_1"]);
    }
}
