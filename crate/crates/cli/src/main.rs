use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use priorguide::experiment::{pareto_sweep, run_experiment, ExperimentConfig};
use priorguide::prior::{fit_gmm_ratio, ood_check, FitConfig, PriorSpec, RatioGmm};
use priorguide::sampler::{priorguide_posterior, Problem, SamplerConfig};
use priorguide::schedule::NoiseSchedule;
use priorguide::score::{
    train_score_net, AnalyticGmmScore, DsmTrainConfig, MaskSampler, MaskedScoreNet, NetConfig, Standardization,
};
use priorguide::simulators::{gaussian_linear, Dataset, Simulator};
use priorguide::util::rng_stream;

#[derive(Parser)]
#[command(name = "priorguide", version, about = "Test-time prior adaptation for diffusion-based simulation-based inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a training set from the simulator's training prior.
    Simulate {
        #[arg(long)]
        simulator: Simulator,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a masked score network on a simulated data set.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with training options; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the prior ratio q / p_train as a positive Gaussian mixture.
    FitRatio {
        #[command(flatten)]
        priors: PriorArgs,
        #[arg(long, default_value_t = 20)]
        components: usize,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check whether q lies within the training prior's coverage.
    OodCheck {
        #[command(flatten)]
        priors: PriorArgs,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        m_p: usize,
        #[arg(long, default_value_t = 100_000)]
        m_q: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw posterior samples of theta for one observation.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        /// Observation, comma separated, in simulator units.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Draw posterior-predictive samples of the unobserved x tokens.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Observed `index:value` pairs, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        observed: Vec<String>,
        #[arg(long)]
        ratio: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Run the full evaluation protocol from a TOML config.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mean MMTV over a grid of diffusion and Langevin step counts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 25, 50])]
        n_steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 4, 8])]
        n_langevin: Vec<usize>,
    },
}

#[derive(Args)]
struct PriorArgs {
    /// Use this simulator's training prior.
    #[arg(long, conflicts_with = "p_train")]
    simulator: Option<Simulator>,
    /// Training prior as a JSON file.
    #[arg(long)]
    p_train: Option<PathBuf>,
    /// Test-time prior as a JSON file.
    #[arg(long)]
    q: PathBuf,
}

impl PriorArgs {
    fn load(&self) -> Result<(PriorSpec, PriorSpec)> {
        let p = match (&self.simulator, &self.p_train) {
            (Some(s), _) => s.p_train(),
            (None, Some(path)) => PriorSpec::load(path).with_context(|| format!("reading {}", path.display()))?,
            (None, None) => bail!("one of --simulator or --p-train is required"),
        };
        let q = PriorSpec::load(&self.q).with_context(|| format!("reading {}", self.q.display()))?;
        Ok((p, q))
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Trained network checkpoint.
    #[arg(long, conflicts_with = "analytic")]
    checkpoint: Option<PathBuf>,
    /// Closed-form base posterior of a Gaussian Linear simulator.
    #[arg(long)]
    analytic: Option<Simulator>,
    /// Prior ratio JSON; omitted means unguided sampling.
    #[arg(long)]
    ratio: Option<PathBuf>,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 25)]
    n_steps: usize,
    #[arg(long, default_value_t = 8)]
    n_langevin: usize,
    #[arg(long, default_value_t = 1000)]
    n_samples: usize,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long)]
    norm_cap: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        let mut cfg = SamplerConfig {
            n_steps: self.n_steps,
            n_langevin: self.n_langevin,
            n_samples: self.n_samples,
            eta: self.eta,
            ..SamplerConfig::default()
        };
        cfg.guidance.norm_cap = self.norm_cap;
        cfg
    }
}

fn load_ratio(path: &Option<PathBuf>) -> Result<Option<RatioGmm>> {
    path.as_ref()
        .map(|p| RatioGmm::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { simulator, n, seed, out } => {
            let d = Dataset::simulate(simulator, n, seed)?;
            d.save(&out)?;
            eprintln!("wrote {} pairs to {}", d.len(), out.display());
        }
        Command::Train {
            data,
            out,
            config,
            hidden,
            max_steps,
            batch_size,
            seed,
        } => {
            let d = Dataset::load(&data).with_context(|| format!("reading {}", data.display()))?;
            let mut cfg = match config {
                Some(p) => toml::from_str::<DsmTrainConfig>(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => DsmTrainConfig::default(),
            };
            if let Some(v) = max_steps {
                cfg.max_steps = v;
                cfg.min_steps = cfg.min_steps.min(v);
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            let rows = d.raw_rows();
            let mut net_cfg = NetConfig::new(d.simulator.dim_theta(), d.simulator.dim_x());
            if let Some(h) = hidden {
                net_cfg = net_cfg.with_hidden(h);
            }
            let net = MaskedScoreNet::new(&net_cfg, Standardization::fit(&rows)?, &mut rng_stream(cfg.seed, 7))?;
            let (net, log) = train_score_net(net, &rows, &cfg, &MaskSampler::default())?;
            net.save(&out)?;
            eprintln!(
                "best validation loss {:.4} at step {}; wrote {}",
                log.best_val_loss,
                log.best_step,
                out.display()
            );
        }
        Command::FitRatio {
            priors,
            components,
            max_steps,
            seed,
            out,
        } => {
            let (p, q) = priors.load()?;
            let q = match p.support() {
                Some((a, b)) => PriorSpec::truncated(q, a.to_vec(), b.to_vec())?,
                None => q,
            };
            let mut cfg = FitConfig {
                n_components: components,
                ..FitConfig::default()
            };
            if let Some(v) = max_steps {
                cfg.max_steps = v;
            }
            let (ratio, report) = fit_gmm_ratio(&p, &q, &cfg, &mut rng_stream(seed, 0))?;
            ratio.save(&out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::OodCheck {
            priors,
            alpha,
            m_p,
            m_q,
            seed,
        } => {
            let (p, q) = priors.load()?;
            let report = ood_check(&p, &q, alpha, m_p, m_q, &mut rng_stream(seed, 0))?;
            println!("{}", serde_json::to_string(&report)?);
            return Ok(report.passed);
        }
        Command::Sample { model, x, sampler } => {
            let cfg = sampler.config();
            let ratio = load_ratio(&model.ratio)?;
            let mut rng = rng_stream(sampler.seed, 0);
            let set = match (&model.checkpoint, model.analytic) {
                (Some(path), _) => {
                    let net = MaskedScoreNet::load(path).with_context(|| format!("reading {}", path.display()))?;
                    let problem = Problem::net_posterior(&net, &x, ratio.as_ref())?;
                    priorguide_posterior(&net, &problem, &cfg, &mut rng)?
                }
                (None, Some(sim @ (Simulator::GaussianLinear10 | Simulator::GaussianLinear20))) => {
                    let post = priorguide::groundtruth::gaussian_linear_posterior(
                        &sim.p_train(),
                        &x,
                        gaussian_linear::NOISE_VAR,
                    )?;
                    let score =
                        AnalyticGmmScore::new(post.weights, post.means, post.variances, NoiseSchedule::default())?;
                    let problem = Problem::direct(sim.dim_theta(), ratio)?;
                    priorguide_posterior(&score, &problem, &cfg, &mut rng)?
                }
                (None, Some(sim)) => bail!("no analytic score for {sim}"),
                (None, None) => bail!("one of --checkpoint or --analytic is required"),
            };
            set.with_meta("seed", sampler.seed).save(&sampler.out, "theta")?;
            eprintln!("wrote {} samples (NFE {}) to {}", cfg.n_samples, cfg.nfe(), sampler.out.display());
        }
        Command::Predict {
            checkpoint,
            observed,
            ratio,
            sampler,
        } => {
            let net = MaskedScoreNet::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let pairs = observed
                .iter()
                .map(|s| {
                    let (i, v) = s.split_once(':').with_context(|| format!("expected index:value, got {s:?}"))?;
                    Ok((i.trim().parse::<usize>()?, v.trim().parse::<f64>()?))
                })
                .collect::<Result<Vec<_>>>()?;
            let ratio = load_ratio(&ratio)?;
            let cfg = sampler.config();
            let problem = Problem::net_predictive(&net, &pairs, ratio.as_ref())?;
            let set = priorguide_posterior(&net, &problem, &cfg, &mut rng_stream(sampler.seed, 0))?;
            let unobserved: Vec<usize> = (0..net.n_x()).filter(|i| !pairs.iter().any(|(j, _)| j == i)).collect();
            set.with_meta("seed", sampler.seed)
                .with_meta("x_indices", unobserved)
                .save(&sampler.out, "x")?;
            eprintln!("wrote predictive samples to {}", sampler.out.display());
        }
        Command::Evaluate { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let rec = run_experiment(&cfg)?;
            for f in &rec.failures {
                eprintln!(
                    "failed {} q{} t{} at {}: {}",
                    f.id.family, f.id.prior_id, f.id.theta_id, f.stage, f.error
                );
            }
            eprintln!(
                "{} reports, {} failures; results in {}",
                rec.reports.len(),
                rec.failures.len(),
                cfg.experiment.output_dir.display()
            );
            return Ok(rec.succeeded());
        }
        Command::Sweep {
            config,
            n_steps,
            n_langevin,
        } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            println!("n_steps,n_langevin,nfe,mean_mmtv");
            for r in pareto_sweep(&cfg, &n_steps, &n_langevin)? {
                println!("{},{},{},{:.4}", r.n_steps, r.n_langevin, r.nfe, r.mean_mmtv);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
