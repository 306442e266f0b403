use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The vehicle is (numerically) on top of the constraint center, where
    /// the distance constraint is not differentiable.
    #[error("constraint singularity: distance {distance:e} is below {eps:e}")]
    Singularity { distance: f64, eps: f64 },

    #[error("integration diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("policy returned input {input:?} outside the input set")]
    InputOutsideSet { input: Vec<f64> },

    #[error("peak of the propagated constraint not bracketed within {horizon} time units")]
    HorizonTooShort { horizon: f64 },

    #[error("non-concave quadratic fit around t = {time} (curvature {curvature:e})")]
    DegeneratePeak { time: f64, curvature: f64 },

    #[error(
        "no valid a_max: the worst sampled state allows a dissipation rate of {value:e} \
         (must be positive for the polynomial barrier to exist)"
    )]
    NoValidAMax { value: f64 },

    #[error("QP solver hit its iteration limit ({iterations})")]
    QpIterationLimit { iterations: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
