use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PriorSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFamily {
    Mild,
    Strong,
    Mixture,
}

impl PriorFamily {
    pub const ALL: [PriorFamily; 3] = [PriorFamily::Mild, PriorFamily::Strong, PriorFamily::Mixture];

    /// Test-prior std as a multiple of the training std.
    pub fn std_factor(self) -> f64 {
        match self {
            PriorFamily::Mild => 0.5,
            PriorFamily::Strong | PriorFamily::Mixture => 0.2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorFamily::Mild => "mild",
            PriorFamily::Strong => "strong",
            PriorFamily::Mixture => "mixture",
        }
    }
}

impl std::fmt::Display for PriorFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(PriorFamily::Mild),
            "strong" => Ok(PriorFamily::Strong),
            "mixture" => Ok(PriorFamily::Mixture),
            other => Err(Error::Parse(format!("unknown prior family {other:?}"))),
        }
    }
}

/// Training std per dimension and the per-dimension interval `[L_i, U_i]`
/// for test-prior means with test std `sigma_i = factor * s_i`.
pub fn mean_bounds(p_train: &PriorSpec, factor: f64) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    match p_train {
        PriorSpec::UniformBox { lower, upper } => {
            let s: Vec<f64> = lower
                .iter()
                .zip(upper)
                .map(|(a, b)| (b - a) / 12f64.sqrt())
                .collect();
            let lo: Vec<f64> = lower.iter().zip(&s).map(|(a, s)| a + 3.0 * factor * s).collect();
            let hi: Vec<f64> = upper.iter().zip(&s).map(|(b, s)| b - 3.0 * factor * s).collect();
            if lo.iter().zip(&hi).any(|(l, u)| l >= u) {
                return Err(Error::Construction(
                    "box too small for a 3-sigma margin around the test mean".into(),
                ));
            }
            Ok((s, lo, hi))
        }
        PriorSpec::GaussianDiag { mean, std } => Ok((
            std.clone(),
            mean.iter().zip(std).map(|(m, s)| m - 3.0 * s).collect(),
            mean.iter().zip(std).map(|(m, s)| m + 3.0 * s).collect(),
        )),
        _ => Err(Error::Unsupported(
            "test priors are generated for uniform or diagonal Gaussian training priors".into(),
        )),
    }
}

fn draw_mean<R: Rng + ?Sized>(lo: &[f64], hi: &[f64], rng: &mut R) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(l, u)| l + (u - l) * rng.random::<f64>())
        .collect()
}

pub fn generate_test_prior<R: Rng + ?Sized>(
    p_train: &PriorSpec,
    family: PriorFamily,
    rng: &mut R,
) -> Result<PriorSpec> {
    let factor = family.std_factor();
    let (s, lo, hi) = mean_bounds(p_train, factor)?;
    let std: Vec<f64> = s.iter().map(|s| factor * s).collect();
    match family {
        PriorFamily::Mild | PriorFamily::Strong => {
            PriorSpec::gaussian(draw_mean(&lo, &hi, rng), std)
        }
        PriorFamily::Mixture => {
            let pi = 0.2 + 0.6 * rng.random::<f64>();
            let var: Vec<f64> = std.iter().map(|s| s * s).collect();
            let m1 = draw_mean(&lo, &hi, rng);
            let m2 = draw_mean(&lo, &hi, rng);
            PriorSpec::gmm(vec![pi, 1.0 - pi], vec![m1, m2], vec![var.clone(), var])
        }
    }
}
