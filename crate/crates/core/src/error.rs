use thiserror::Error;

/// Errors surfaced by model construction, inference blocks and the outer loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain violation: {0}")]
    DomainViolation(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("EP did not converge: {0}")]
    EpFailure(String),

    #[error("optimizer failed: {0}")]
    OptimFailure(String),

    #[error("block '{block}' failed at outer iteration {iteration}: {source}")]
    BlockFailed {
        block: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
