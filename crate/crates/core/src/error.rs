use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),

    #[error("degenerate base rate {0}: mean target must lie strictly inside (0, 1)")]
    DegenerateBaseRate(f64),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("feature universe mismatch: {0} vs {1} features")]
    UniverseMismatch(usize, usize),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("stage sizes must be strictly decreasing and fit the pool: {0}")]
    StageSizes(String),

    #[error("sweep point {param}={value}: {source}")]
    SweepPoint {
        param: String,
        value: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the name of the pipeline stage that produced it.
    pub fn at_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// True for errors raised by a diverging optimizer, anywhere in the chain.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence { .. } => true,
            Error::SweepPoint { source, .. } | Error::Stage { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
