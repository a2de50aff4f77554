//! Forward models with their training priors and parameter normalizations.
//!
//! Parameters are handled in normalized coordinates throughout; each
//! simulator maps them to physical values internally.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::prior::PriorSpec;
use crate::score::Standardization;
use crate::util::rng_stream;

pub mod bci;
pub mod gaussian_linear;
pub mod oup;
pub mod turin;
pub mod two_moons;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simulator {
    TwoMoons,
    Oup,
    Turin,
    #[serde(rename = "gaussian_linear_10")]
    GaussianLinear10,
    #[serde(rename = "gaussian_linear_20")]
    GaussianLinear20,
    Bci,
}

impl Simulator {
    pub const ALL: [Simulator; 6] = [
        Simulator::TwoMoons,
        Simulator::Oup,
        Simulator::Turin,
        Simulator::GaussianLinear10,
        Simulator::GaussianLinear20,
        Simulator::Bci,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Simulator::TwoMoons => "two_moons",
            Simulator::Oup => "oup",
            Simulator::Turin => "turin",
            Simulator::GaussianLinear10 => "gaussian_linear_10",
            Simulator::GaussianLinear20 => "gaussian_linear_20",
            Simulator::Bci => "bci",
        }
    }

    pub fn dim_theta(self) -> usize {
        match self {
            Simulator::TwoMoons | Simulator::Oup => 2,
            Simulator::Turin => 4,
            Simulator::GaussianLinear10 => 10,
            Simulator::GaussianLinear20 => 20,
            Simulator::Bci => 5,
        }
    }

    pub fn dim_x(self) -> usize {
        match self {
            Simulator::TwoMoons => 2,
            Simulator::Oup => oup::T_STEPS,
            Simulator::Turin => turin::N_S,
            Simulator::GaussianLinear10 => 10,
            Simulator::GaussianLinear20 => 20,
            Simulator::Bci => bci::N_TRIALS,
        }
    }

    /// Training prior in normalized coordinates.
    pub fn p_train(self) -> PriorSpec {
        let d = self.dim_theta();
        let p = match self {
            Simulator::TwoMoons | Simulator::Oup => PriorSpec::uniform(vec![-1.0; d], vec![1.0; d]),
            Simulator::Turin => PriorSpec::uniform(vec![0.0; d], vec![1.0; d]),
            Simulator::GaussianLinear10 | Simulator::GaussianLinear20 => {
                PriorSpec::gaussian(vec![0.0; d], vec![gaussian_linear::NOISE_VAR.sqrt(); d])
            }
            Simulator::Bci => PriorSpec::gaussian(vec![0.0; d], vec![1.0; d]),
        };
        p.expect("static training prior")
    }

    /// Normalized to physical parameters.
    pub fn to_physical(self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim_theta(), theta.len(), "simulator parameters")?;
        Ok(match self {
            Simulator::Oup => oup::to_physical(theta),
            Simulator::Turin => turin::to_physical(theta),
            Simulator::Bci => bci::to_physical(theta),
            _ => theta.to_vec(),
        })
    }

    pub fn to_normalized(self, phys: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim_theta(), phys.len(), "simulator parameters")?;
        Ok(match self {
            Simulator::Oup => oup::to_normalized(phys),
            Simulator::Turin => turin::to_normalized(phys),
            Simulator::Bci => bci::to_normalized(phys),
            _ => phys.to_vec(),
        })
    }

    /// One draw of `x` for normalized `theta`.
    pub fn simulate<R: Rng + ?Sized>(self, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        check_len(self.dim_theta(), theta.len(), "simulator parameters")?;
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("simulator parameters must be finite".into()));
        }
        Ok(match self {
            Simulator::TwoMoons => two_moons::simulate(theta, rng),
            Simulator::Oup => oup::simulate(theta, rng),
            Simulator::Turin => turin::simulate(theta, rng),
            Simulator::GaussianLinear10 | Simulator::GaussianLinear20 => {
                gaussian_linear::simulate(theta, rng)
            }
            Simulator::Bci => bci::simulate(theta, rng),
        })
    }

    /// `log p(x | theta)` where it is tractable.
    pub fn log_likelihood(self, theta: &[f64], x: &[f64]) -> Result<f64> {
        check_len(self.dim_theta(), theta.len(), "simulator parameters")?;
        check_len(self.dim_x(), x.len(), "simulator output")?;
        match self {
            Simulator::TwoMoons => Ok(two_moons::log_likelihood(theta, x)),
            Simulator::GaussianLinear10 | Simulator::GaussianLinear20 => {
                Ok(gaussian_linear::log_likelihood(theta, x))
            }
            _ => Err(Error::Unsupported(format!("{self} has no tractable likelihood"))),
        }
    }

    /// Upper bound of the likelihood over `(theta, x)`, for rejection sampling.
    pub fn log_likelihood_bound(self) -> Result<f64> {
        match self {
            Simulator::TwoMoons => Ok(two_moons::log_likelihood_bound()),
            Simulator::GaussianLinear10 | Simulator::GaussianLinear20 => {
                let d = self.dim_x() as f64;
                Ok(-0.5 * d * (crate::util::LN_2PI + gaussian_linear::NOISE_VAR.ln()))
            }
            _ => Err(Error::Unsupported(format!("{self} has no tractable likelihood"))),
        }
    }

    /// Simulates `theta` rows in parallel; row `i` uses its own stream of `seed`.
    pub fn simulate_batch(self, thetas: &[Vec<f64>], seed: u64) -> Result<Vec<Vec<f64>>> {
        thetas
            .par_iter()
            .enumerate()
            .map(|(i, th)| self.simulate(th, &mut rng_stream(seed, i as u64)))
            .collect()
    }
}

impl fmt::Display for Simulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Simulator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Simulator::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown simulator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    simulator: Simulator,
    n_theta: usize,
    n_x: usize,
    seed: u64,
    x_standardization: Standardization,
}

/// Training pairs `(theta_norm, x_standardized)` with frozen `x` statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub simulator: Simulator,
    pub seed: u64,
    pub x_standardization: Standardization,
    pub theta: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

impl Dataset {
    /// Draws `n` parameters from the training prior and simulates them.
    pub fn simulate(sim: Simulator, n: usize, seed: u64) -> Result<Self> {
        let theta = sim.p_train().sample_n(&mut rng_stream(seed, u64::MAX), n)?;
        let x_raw = sim.simulate_batch(&theta, seed)?;
        let x_standardization = Standardization::fit(&x_raw)?;
        let x = x_raw.iter().map(|r| x_standardization.forward(r)).collect();
        Ok(Self {
            simulator: sim,
            seed,
            x_standardization,
            theta,
            x,
        })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Rows `[theta | x]` with `x` in simulator units.
    pub fn raw_rows(&self) -> Vec<Vec<f64>> {
        self.theta
            .iter()
            .zip(&self.x)
            .map(|(t, x)| {
                let mut r = t.clone();
                r.extend(self.x_standardization.inverse(x));
                r
            })
            .collect()
    }

    /// CSV with a leading `#` line holding the JSON header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = DatasetHeader {
            simulator: self.simulator,
            n_theta: self.simulator.dim_theta(),
            n_x: self.simulator.dim_x(),
            seed: self.seed,
            x_standardization: self.x_standardization.clone(),
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# {}", serde_json::to_string(&header)?)?;
        let cols: Vec<String> = (0..header.n_theta)
            .map(|i| format!("theta{i}"))
            .chain((0..header.n_x).map(|i| format!("x{i}")))
            .collect();
        writeln!(w, "{}", cols.join(","))?;
        for (t, x) in self.theta.iter().zip(&self.x) {
            let row: Vec<String> = t.iter().chain(x).map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let first = lines.next().transpose()?.unwrap_or_default();
        let json = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::Parse("dataset is missing its header line".into()))?;
        let h: DatasetHeader = serde_json::from_str(json)?;
        if h.n_theta != h.simulator.dim_theta() || h.n_x != h.simulator.dim_x() {
            return Err(Error::Parse("dataset dimensions do not match the simulator".into()));
        }
        check_len(h.n_x, h.x_standardization.len(), "dataset standardization")?;
        lines.next().transpose()?;
        let (mut theta, mut x) = (Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("dataset row {}: {e}", lineno + 3)))?;
            check_len(h.n_theta + h.n_x, vals.len(), "dataset row")?;
            theta.push(vals[..h.n_theta].to_vec());
            x.push(vals[h.n_theta..].to_vec());
        }
        Ok(Self {
            simulator: h.simulator,
            seed: h.seed,
            x_standardization: h.x_standardization,
            theta,
            x,
        })
    }
}
