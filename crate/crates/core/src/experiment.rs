//! End-to-end protocol: test priors, datasets, ratio fits, guided sampling,
//! evaluation and artifact persistence.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groundtruth::{gaussian_linear_posterior, rejection_sample, DEFAULT_MAX_PROPOSALS};
use crate::metrics::{Evaluation, MetricReport};
use crate::prior::{fit_gmm_ratio, generate_test_prior, ood_check, FitConfig, PriorFamily, PriorSpec, RatioGmm};
use crate::sampler::{priorguide_posterior, Problem, SampleSet, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::score::{AnalyticGmmScore, MaskedScoreNet};
use crate::simulators::{gaussian_linear, Simulator};
use crate::util::rng_stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Posterior,
    Predictive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    #[default]
    First,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Closed-form base posterior (Gaussian Linear only).
    #[default]
    Analytic,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub source: ModelSource,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodConfig {
    pub alpha: f64,
    pub m_p: usize,
    pub m_q: usize,
    /// Draws of a test prior before its datasets are marked failed.
    pub max_attempts: usize,
}

impl Default for OodConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            m_p: 100_000,
            m_q: 100_000,
            max_attempts: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub simulator: Simulator,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_families")]
    pub families: Vec<PriorFamily>,
    #[serde(default = "default_count")]
    pub n_priors: usize,
    #[serde(default = "default_count")]
    pub n_params: usize,
    /// Ten priors and ten parameters per family.
    #[serde(default)]
    pub full_protocol: bool,
    #[serde(default = "default_reference")]
    pub n_reference_samples: usize,
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub observed_block: Block,
    #[serde(default = "default_fraction")]
    pub observed_fraction: f64,
    /// Also run the unguided sampler on every dataset.
    #[serde(default)]
    pub baseline: bool,
}

fn default_families() -> Vec<PriorFamily> {
    PriorFamily::ALL.to_vec()
}
fn default_count() -> usize {
    3
}
fn default_reference() -> usize {
    1000
}
fn default_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelConfig,
    /// Defaults per simulator when absent.
    #[serde(default)]
    pub sampler: Option<SamplerConfig>,
    #[serde(default)]
    pub ratio: FitConfig,
    #[serde(default)]
    pub ood: OodConfig,
}

/// `N = 250, N_L = 0` for BCI, `N = 25, N_L = 8` elsewhere.
pub fn default_sampler(sim: Simulator) -> SamplerConfig {
    match sim {
        Simulator::Bci => SamplerConfig::predictor_only(250),
        _ => SamplerConfig::default(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sampler(&self) -> SamplerConfig {
        self.sampler.clone().unwrap_or_else(|| default_sampler(self.experiment.simulator))
    }

    pub fn counts(&self) -> (usize, usize) {
        if self.experiment.full_protocol {
            (10, 10)
        } else {
            (self.experiment.n_priors, self.experiment.n_params)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler().validate()?;
        let e = &self.experiment;
        if e.families.is_empty() {
            return Err(Error::Config("at least one prior family is required".into()));
        }
        let (np, nt) = self.counts();
        if np == 0 || nt == 0 || e.n_reference_samples == 0 {
            return Err(Error::Config("prior, parameter and reference counts must be positive".into()));
        }
        if !(e.observed_fraction > 0.0 && e.observed_fraction < 1.0) {
            return Err(Error::Config("observed_fraction must lie in (0, 1)".into()));
        }
        match (self.model.source, &self.model.checkpoint) {
            (ModelSource::Checkpoint, None) => {
                return Err(Error::Config("model.checkpoint is required for a checkpoint source".into()))
            }
            (ModelSource::Analytic, _) => {
                if !matches!(e.simulator, Simulator::GaussianLinear10 | Simulator::GaussianLinear20) {
                    return Err(Error::Config(format!(
                        "analytic scores exist only for Gaussian Linear, not {}",
                        e.simulator
                    )));
                }
                if e.task == Task::Predictive {
                    return Err(Error::Config("predictive tasks need a checkpoint model".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// FNV-1a of the canonical TOML serialization.
    pub fn hash(&self) -> Result<String> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml()?.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Ok(format!("{h:016x}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetId {
    pub family: PriorFamily,
    pub prior_id: usize,
    pub theta_id: usize,
}

impl DatasetId {
    fn stem(&self) -> String {
        format!("{}_q{}_t{}", self.family, self.prior_id, self.theta_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFailure {
    pub id: DatasetId,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub simulator: Simulator,
    pub nfe: usize,
    pub reports: Vec<MetricReport>,
    pub failures: Vec<DatasetFailure>,
    pub sample_files: Vec<PathBuf>,
    /// Wall-clock seconds per successful dataset, in report order.
    pub timings: Vec<f64>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Everything needed to sample and evaluate one dataset.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub id: DatasetId,
    pub q: PriorSpec,
    pub ratio: RatioGmm,
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    /// Observed `(index, value)` pairs for predictive tasks.
    pub observed: Vec<(usize, f64)>,
    /// Value the metrics compare against: theta or the unobserved x.
    pub truth: Vec<f64>,
    pub reference: Option<Array2<f64>>,
    /// Test-prior draws needed to pass the OOD check.
    pub prior_attempts: usize,
    seed: u64,
}

/// The loaded base model.
pub enum Model {
    Analytic(NoiseSchedule),
    Net(Box<MaskedScoreNet>),
}

impl Model {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        match cfg.model.source {
            ModelSource::Analytic => Ok(Model::Analytic(NoiseSchedule::default())),
            ModelSource::Checkpoint => {
                let path = cfg.model.checkpoint.as_ref().expect("validated");
                let net = MaskedScoreNet::load(path)?;
                let sim = cfg.experiment.simulator;
                if net.n_theta() != sim.dim_theta() || net.n_x() != sim.dim_x() {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint has {} + {} tokens, {} needs {} + {}",
                        net.n_theta(),
                        net.n_x(),
                        sim,
                        sim.dim_theta(),
                        sim.dim_x()
                    )));
                }
                Ok(Model::Net(Box::new(net)))
            }
        }
    }
}

/// Base posterior score for Gaussian Linear under the training prior.
fn analytic_posterior(sim: Simulator, x: &[f64], schedule: NoiseSchedule) -> Result<AnalyticGmmScore> {
    let post = gaussian_linear_posterior(&sim.p_train(), x, gaussian_linear::NOISE_VAR)?;
    AnalyticGmmScore::new(post.weights, post.means, post.variances, schedule)
}

/// Samples one dataset with or without guidance.
pub fn sample_dataset<R: Rng + ?Sized>(
    model: &Model,
    sim: Simulator,
    task: Task,
    data: &PreparedDataset,
    guided: bool,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleSet> {
    let ratio = guided.then_some(&data.ratio);
    match model {
        Model::Analytic(sched) => {
            let score = analytic_posterior(sim, &data.x, *sched)?;
            let problem = Problem::direct(sim.dim_theta(), ratio.cloned())?;
            priorguide_posterior(&score, &problem, cfg, rng)
        }
        Model::Net(net) => {
            let problem = match task {
                Task::Posterior => Problem::net_posterior(net, &data.x, ratio)?,
                Task::Predictive => Problem::net_predictive(net, &data.observed, ratio)?,
            };
            priorguide_posterior(net.as_ref(), &problem, cfg, rng)
        }
    }
}

fn observed_indices(n_x: usize, block: Block, fraction: f64) -> Vec<usize> {
    let k = ((fraction * n_x as f64).ceil() as usize).clamp(1, n_x - 1);
    match block {
        Block::First => (0..k).collect(),
        Block::Last => (n_x - k..n_x).collect(),
    }
}

fn reference_samples<R: Rng + ?Sized>(
    sim: Simulator,
    q: &PriorSpec,
    x: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Option<Array2<f64>>> {
    match sim {
        Simulator::GaussianLinear10 | Simulator::GaussianLinear20 => {
            let post = gaussian_linear_posterior(q, x, gaussian_linear::NOISE_VAR)?;
            Ok(Some(post.sample(rng, n)?.samples))
        }
        Simulator::TwoMoons => {
            let (set, _) = rejection_sample(
                |th| sim.log_likelihood(th, x).unwrap_or(f64::NEG_INFINITY),
                q,
                sim.log_likelihood_bound()?,
                n,
                DEFAULT_MAX_PROPOSALS,
                rng,
            )?;
            Ok(Some(set.samples))
        }
        _ => Ok(None),
    }
}

struct PriorStage {
    q: PriorSpec,
    ratio: RatioGmm,
    attempts: usize,
}

fn prepare_prior(cfg: &ExperimentConfig, family: PriorFamily, prior_id: usize) -> std::result::Result<PriorStage, (String, Error)> {
    let sim = cfg.experiment.simulator;
    let p_train = sim.p_train();
    let fam_idx = PriorFamily::ALL.iter().position(|f| *f == family).expect("known family") as u64;
    let mut rng = rng_stream(cfg.experiment.seed, (1 << 40) + fam_idx * 10_000 + prior_id as u64);
    fn stage(s: &'static str) -> impl Fn(Error) -> (String, Error) {
        move |e| (s.to_string(), e)
    }
    let mut attempt = 0;
    let q = loop {
        attempt += 1;
        let q = generate_test_prior(&p_train, family, &mut rng).map_err(stage("prior"))?;
        let report = ood_check(&p_train, &q, cfg.ood.alpha, cfg.ood.m_p, cfg.ood.m_q, &mut rng).map_err(stage("ood"))?;
        if report.passed {
            break q;
        }
        if attempt >= cfg.ood.max_attempts.max(1) {
            return Err(("ood".into(), report.into_result().expect_err("failed check")));
        }
    };
    let q = match p_train.support() {
        Some((a, b)) => PriorSpec::truncated(q, a.to_vec(), b.to_vec()).map_err(stage("prior"))?,
        None => q,
    };
    let (ratio, _) = fit_gmm_ratio(&p_train, &q, &cfg.ratio, &mut rng).map_err(stage("ratio"))?;
    Ok(PriorStage { q, ratio, attempts: attempt })
}

fn prepare_dataset(cfg: &ExperimentConfig, id: DatasetId, prior: &PriorStage) -> Result<PreparedDataset> {
    let sim = cfg.experiment.simulator;
    let fam_idx = PriorFamily::ALL.iter().position(|f| *f == id.family).expect("known family") as u64;
    let seed_stream = (fam_idx * 10_000 + id.prior_id as u64) * 10_000 + id.theta_id as u64;
    let mut rng = rng_stream(cfg.experiment.seed, (2 << 40) + seed_stream);
    let theta = prior.q.sample(&mut rng)?;
    let x = sim.simulate(&theta, &mut rng)?;
    let (observed, truth, reference) = match cfg.experiment.task {
        Task::Posterior => {
            let reference = reference_samples(sim, &prior.q, &x, cfg.experiment.n_reference_samples, &mut rng)?;
            (Vec::new(), theta.clone(), reference)
        }
        Task::Predictive => {
            let obs = observed_indices(sim.dim_x(), cfg.experiment.observed_block, cfg.experiment.observed_fraction);
            let truth = (0..sim.dim_x()).filter(|i| !obs.contains(i)).map(|i| x[i]).collect();
            (obs.iter().map(|&i| (i, x[i])).collect(), truth, None)
        }
    };
    Ok(PreparedDataset {
        id,
        q: prior.q.clone(),
        ratio: prior.ratio.clone(),
        theta,
        x,
        observed,
        truth,
        reference,
        prior_attempts: prior.attempts,
        seed: (3 << 40) + seed_stream,
    })
}

/// Builds all datasets of the protocol; failures are recorded per dataset.
pub fn prepare_datasets(cfg: &ExperimentConfig) -> (Vec<PreparedDataset>, Vec<DatasetFailure>) {
    let (n_priors, n_params) = cfg.counts();
    let priors: Vec<(PriorFamily, usize)> = cfg
        .experiment
        .families
        .iter()
        .flat_map(|&f| (0..n_priors).map(move |i| (f, i)))
        .collect();
    let results: Vec<Vec<std::result::Result<PreparedDataset, DatasetFailure>>> = priors
        .par_iter()
        .map(|&(family, prior_id)| {
            let ids = (0..n_params).map(|theta_id| DatasetId {
                family,
                prior_id,
                theta_id,
            });
            match prepare_prior(cfg, family, prior_id) {
                Err((stage, e)) => ids
                    .map(|id| {
                        Err(DatasetFailure {
                            id,
                            stage: stage.clone(),
                            error: e.to_string(),
                        })
                    })
                    .collect(),
                Ok(p) => ids
                    .map(|id| {
                        prepare_dataset(cfg, id, &p).map_err(|e| DatasetFailure {
                            id,
                            stage: "dataset".into(),
                            error: e.to_string(),
                        })
                    })
                    .collect(),
            }
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(d) => ok.push(d),
            Err(f) => failed.push(f),
        }
    }
    (ok, failed)
}

struct Outcome {
    id: DatasetId,
    method: &'static str,
    set: SampleSet,
    report: MetricReport,
    seconds: f64,
}

fn evaluate_one(
    cfg: &ExperimentConfig,
    model: &Model,
    sampler: &SamplerConfig,
    data: &PreparedDataset,
    guided: bool,
) -> Result<Outcome> {
    let sim = cfg.experiment.simulator;
    let method = if guided { "priorguide" } else { "unguided" };
    let start = Instant::now();
    let mut rng = rng_stream(data.seed, guided as u64);
    let set = sample_dataset(model, sim, cfg.experiment.task, data, guided, sampler, &mut rng)?;
    let eval = Evaluation {
        truth: &data.truth,
        samples: set.samples.view(),
        reference: data.reference.as_ref().map(|r| r.view()),
    };
    let report = eval.report(method, sim.name(), data.id.family.name(), run_index(cfg, data.id), &mut rng)?;
    let set = set
        .with_meta("method", method)
        .with_meta("simulator", sim.name())
        .with_meta("family", data.id.family.name())
        .with_meta("prior_id", data.id.prior_id)
        .with_meta("theta_id", data.id.theta_id)
        .with_meta("seed", data.seed)
        .with_meta("prior_attempts", data.prior_attempts)
        .with_meta("theta_true", data.theta.clone());
    Ok(Outcome {
        id: data.id,
        method,
        set,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_index(cfg: &ExperimentConfig, id: DatasetId) -> usize {
    id.prior_id * cfg.counts().1 + id.theta_id
}

/// Runs the full protocol and persists samples, priors, ratios, metrics and
/// the run record under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let out = &cfg.experiment.output_dir;
    for sub in ["samples", "priors", "ratios"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let model = Model::load(cfg)?;
    let sampler = cfg.sampler();
    let (datasets, mut failures) = prepare_datasets(cfg);

    for d in datasets.iter().filter(|d| d.id.theta_id == 0) {
        let stem = format!("{}_q{}", d.id.family, d.id.prior_id);
        d.q.save(out.join("priors").join(format!("{stem}.json")))?;
        d.ratio.save(out.join("ratios").join(format!("{stem}.json")))?;
    }

    let mut jobs: Vec<(&PreparedDataset, bool)> = datasets.iter().map(|d| (d, true)).collect();
    if cfg.experiment.baseline {
        jobs.extend(datasets.iter().map(|d| (d, false)));
    }
    let results: Vec<(DatasetId, Result<Outcome>)> = jobs
        .par_iter()
        .map(|(d, guided)| (d.id, evaluate_one(cfg, &model, &sampler, d, *guided)))
        .collect();

    let metrics_path = out.join("metrics.jsonl");
    std::fs::write(&metrics_path, "")?;
    let mut record = RunRecord {
        config_hash: cfg.hash()?,
        simulator: cfg.experiment.simulator,
        nfe: sampler.nfe(),
        reports: Vec::new(),
        failures: Vec::new(),
        sample_files: Vec::new(),
        timings: Vec::new(),
    };
    for (id, r) in results {
        match r {
            Ok(o) => {
                let path = out.join("samples").join(format!("{}_{}.csv", o.id.stem(), o.method));
                let prefix = if cfg.experiment.task == Task::Posterior { "theta" } else { "x" };
                o.set.save(&path, prefix)?;
                o.report.append_jsonl(&metrics_path)?;
                record.sample_files.push(path);
                record.reports.push(o.report);
                record.timings.push(o.seconds);
            }
            Err(e) => failures.push(DatasetFailure {
                id,
                stage: "sample".into(),
                error: e.to_string(),
            }),
        }
    }
    record.failures = failures;
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_steps: usize,
    pub n_langevin: usize,
    pub nfe: usize,
    pub mean_mmtv: f64,
    pub n_datasets: usize,
}

/// Mean guided MMTV over the protocol's datasets for every `(N, N_L)`
/// pair. Writes `sweep.csv` under the output directory.
pub fn pareto_sweep(cfg: &ExperimentConfig, n_steps: &[usize], n_langevin: &[usize]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let model = Model::load(cfg)?;
    let (datasets, failures) = prepare_datasets(cfg);
    if let Some(f) = failures.first() {
        return Err(Error::Config(format!("sweep dataset {:?} failed at {}: {}", f.id, f.stage, f.error)));
    }
    if datasets.iter().any(|d| d.reference.is_none()) {
        return Err(Error::Unsupported(format!(
            "{} has no reference posterior for MMTV",
            cfg.experiment.simulator
        )));
    }
    let mut rows = Vec::new();
    for &n in n_steps {
        for &nl in n_langevin {
            let sampler = SamplerConfig {
                n_steps: n,
                n_langevin: nl,
                ..cfg.sampler()
            };
            sampler.validate()?;
            let mmtvs: Vec<f64> = datasets
                .par_iter()
                .map(|d| {
                    let o = evaluate_one(cfg, &model, &sampler, d, true)?;
                    Ok(o.report.mmtv.expect("reference present"))
                })
                .collect::<Result<_>>()?;
            rows.push(SweepRow {
                n_steps: n,
                n_langevin: nl,
                nfe: sampler.nfe(),
                mean_mmtv: mmtvs.iter().sum::<f64>() / mmtvs.len() as f64,
                n_datasets: mmtvs.len(),
            });
        }
    }
    std::fs::create_dir_all(&cfg.experiment.output_dir)?;
    let mut text = String::from("n_steps,n_langevin,nfe,mean_mmtv,n_datasets\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.n_steps, r.n_langevin, r.nfe, r.mean_mmtv, r.n_datasets));
    }
    std::fs::write(cfg.experiment.output_dir.join("sweep.csv"), text)?;
    Ok(rows)
}
