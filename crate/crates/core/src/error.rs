use thiserror::Error;

use crate::prior::RatioGmm;
use crate::score::MaskedScoreNet;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("guidance degenerate at t={t:e} (step {step:?}): {reason}")]
    GuidanceDegenerate {
        t: f64,
        step: Option<usize>,
        reason: String,
    },

    /// Training produced a non-finite loss. The last finite checkpoint is kept.
    #[error("training diverged at step {step}: {reason}")]
    Training {
        step: usize,
        reason: String,
        checkpoint: Box<MaskedScoreNet>,
    },

    /// The ratio fit produced a non-finite loss; `best` is the best fit so far.
    #[error("ratio fit failed after {steps} steps: {reason}")]
    Fit {
        steps: usize,
        reason: String,
        best: Box<RatioGmm>,
    },

    #[error("invalid prior ratio: {0}")]
    RatioValidity(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("rejection sampler exhausted: 0 accepted out of {proposals} proposals")]
    Exhausted { proposals: usize },

    #[error("degenerate importance weights: {0}")]
    DegenerateWeights(String),

    #[error("test-prior construction failed: {0}")]
    Construction(String),

    #[error("prior failed the OOD diagnostic: fraction {fraction} > alpha {alpha}")]
    OutOfDistribution { fraction: f64, alpha: f64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(expected: usize, got: usize, context: &'static str) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape {
            expected,
            got,
            context,
        })
    }
}
