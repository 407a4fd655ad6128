use crate::graph::Address;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution parameters: {0}")]
    InvalidDistribution(String),
    #[error("value type mismatch: {0}")]
    TypeMismatch(String),
    #[error("value {value} at {addr} is outside the support")]
    OutOfSupport { addr: Address, value: String },
    #[error("dependency cycle through {0}")]
    Cycle(Address),
    #[error("unknown address {0}")]
    UnknownAddress(Address),
    #[error("model does not define {0}")]
    UndefinedVariable(Address),
    #[error("cannot mutate observed node {0}")]
    ObservedMutation(Address),
    #[error("stale diff: {0}")]
    StaleDiff(String),
    #[error("no support transform for discrete support")]
    DiscreteTransform,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no compiled artifact for family `{0}`")]
    MissingArtifact(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("non-finite acceptance ratio at {addr}: {detail}")]
    NonFiniteAcceptance { addr: Address, detail: String },
    #[error("artifact version `{found}` is not supported (expected `{expected}`)")]
    Version { found: String, expected: String },
    #[error("malformed artifact: {0}")]
    Malformed(String),
    #[error("diagnostics: {0}")]
    Diagnostics(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("chain {index} failed: {source}")]
    Chain { index: usize, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
