use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FairError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("line {line}, column `{column}`: {message}")]
    Cell {
        line: usize,
        column: String,
        message: String,
    },

    #[error("sensitive column has one value")]
    SingleGroup,

    #[error("invalid split: {0}")]
    Split(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("labels required for {0}")]
    MissingLabels(String),

    #[error("group z={group} has no rows with {condition}")]
    EmptyCondition { group: u8, condition: String },

    #[error("w-step did not converge (kkt residual {residual:.3e}, violation {violation:.3e})")]
    NotConverged { residual: f64, violation: f64 },

    #[error("infeasible at c={c}: slack {slack:.3e} after {iterations} ccp iterations")]
    Infeasible {
        c: f64,
        slack: f64,
        iterations: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("lp solver failed: {0}")]
    Lp(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        source: Box<FairError>,
    },

    #[error("config: {0}")]
    Config(String),
}

impl FairError {
    /// Strips iteration annotations.
    pub fn root(&self) -> &FairError {
        match self {
            FairError::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self.root(), FairError::Infeasible { .. })
    }
}

pub type Result<T> = std::result::Result<T, FairError>;
