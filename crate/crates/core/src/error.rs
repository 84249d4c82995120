use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shared block {block} is not observed by any agent")]
    UnobservedBlock { block: usize },

    #[error("could not generate a scene where every point has {min_views} view(s) after {retries} retries")]
    SceneGeneration { min_views: usize, retries: usize },

    #[error("local Hessian block for agent {agent} pose {pose} is not positive definite")]
    NotPositiveDefinite { agent: usize, pose: usize },

    #[error("aggregated preconditioner block {block} is singular even after jitter")]
    SingularBlock { block: usize },

    #[error("protocol violation for agent {agent} block {block}: {reason}")]
    ProtocolViolation {
        agent: usize,
        block: usize,
        reason: &'static str,
    },

    #[error("agent {agent} and server state diverged: {what}")]
    CacheIncoherent { agent: usize, what: &'static str },

    #[error("problem too large for dense analysis: {dim} > {limit}")]
    ScaleGuard { dim: usize, limit: usize },

    #[error("degenerate alignment: {0}")]
    DegenerateAlignment(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("wire format: {0}")]
    Wire(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
