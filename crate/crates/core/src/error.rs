use nalgebra::Complex;
use thiserror::Error;

use crate::stabilize::NewtonTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{what} is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { what: String, asymmetry: f64 },

    #[error(
        "Lyapunov operator is singular or ill-conditioned (condition ≈ {condition:.3e}); \
         eigenvalue pair sum closest to zero is {closest_sum}"
    )]
    LyapunovSingular {
        condition: f64,
        closest_sum: Complex<f64>,
    },

    #[error(
        "{what} is rank deficient: rank {rank} of {cols} columns \
         (singular values {sigma_min:.3e} .. {sigma_max:.3e})"
    )]
    RankDeficient {
        what: String,
        rank: usize,
        cols: usize,
        sigma_min: f64,
        sigma_max: f64,
    },

    #[error("{0} is singular or ill-conditioned")]
    Singular(String),

    #[error("eigenvalue solver did not converge")]
    EigenNoConvergence,

    #[error("{what}: iteration cap {cap} reached (last measure {last:.3e})")]
    MaxIterations {
        what: String,
        cap: usize,
        last: f64,
    },

    #[error("seed tuple is not stabilizing (spectral abscissa {abscissa:.6e})")]
    SeedNotStabilizing {
        abscissa: f64,
        trace: Box<NewtonTrace>,
    },

    #[error("Newton step for player {player} at iterate k={k} failed: {reason}")]
    NewtonStep {
        player: usize,
        k: usize,
        reason: String,
    },

    #[error("stability lost at s={s} (spectral abscissa {abscissa:.6e})")]
    StabilityLost { s: usize, abscissa: f64 },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory diverged at t={t:.6} (|x| = {norm:.3e})")]
    Diverged { t: f64, norm: f64 },

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stage tag of the outermost tagged failure, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// Innermost error with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
