use crate::C64;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid multisine design: {0}")]
    InvalidDesign(String),

    #[error("invalid time record: {0}")]
    InvalidRecord(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("eigenvalue iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("matrix is defective or nearly so (eigenvector condition {cond:.3e}); perturb the input and retry")]
    Defective { cond: f64 },

    #[error("eigenvalue {value} lies on or next to the branch cut of the principal logarithm")]
    BranchCut { value: C64 },

    #[error("window width {width} is below the minimum {required}; use a wider window")]
    WindowTooNarrow { width: usize, required: usize },

    #[error("{lines} excited lines cannot hold a window of width {width}")]
    TooFewLines { lines: usize, width: usize },

    #[error("equilibrium solve did not converge (residual {residual:.3e})")]
    Equilibrium { residual: f64 },

    #[error("simulation unstable at t = {time:.4} s (state norm {norm:.3e})")]
    Unstable { time: f64, norm: f64 },

    #[error("invalid plant: {0}")]
    InvalidPlant(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}
