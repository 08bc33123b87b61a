use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("coincident sites: fragment {a} site {site_a} and fragment {b} site {site_b}")]
    SingularGeometry {
        a: usize,
        site_a: usize,
        b: usize,
        site_b: usize,
    },

    #[error("singular linear system: {0}")]
    Numerical(String),

    #[error("monomer loop did not converge after {iterations} iterations (last max charge change {last_delta:.3e})")]
    NotConverged { iterations: usize, last_delta: f64 },

    #[error("system too large for the dense oracle: {sites} sites (limit {limit})")]
    Capacity { sites: usize, limit: usize },

    #[error("parameters not identifiable: {0}")]
    Identifiability(String),

    #[error("calibration did not converge after {rounds} rounds (objective {objective:.3e}, relative change {rel_change:.3e})")]
    CalibrationDiverged {
        rounds: usize,
        objective: f64,
        rel_change: f64,
    },

    #[error("workflow graph contains a cycle through module '{0}'")]
    Cycle(String),

    #[error("unknown preset '{0}'")]
    UnknownPreset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
