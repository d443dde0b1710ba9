use thiserror::Error;

use crate::kernels::InfeasibilityCertificate;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("cannot parse probability `{0}`")]
    Parse(String),

    #[error("malformed tree encoding: {0}")]
    Decode(String),

    #[error("vertex set is not prefix-closed: {0} has no parent")]
    NotPrefixClosed(String),

    #[error("{what} exceeds cap: {value} > {cap}")]
    CapExceeded {
        what: &'static str,
        value: usize,
        cap: usize,
    },

    #[error("no monotone coupling exists: {0}")]
    Infeasible(Box<InfeasibilityCertificate>),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
