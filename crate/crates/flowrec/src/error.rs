//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("argument outside admissible domain: {0}")]
    Domain(String),
    #[error("space tags do not match: expected {expected}, got {got}")]
    TagMismatch { expected: String, got: String },
    #[error("linear solve failed: {0}")]
    LinSolve(String),
    #[error("time integration unstable: {0}")]
    Stability(String),
    #[error("rank deficient: requested {requested}, numerical rank {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("basis is not orthonormal (max deviation {0:.3e})")]
    BasisNotOrthonormal(f64),
    #[error("reconstruction ill-conditioned: beta = {0:.3e}")]
    IllConditioned(f64),
    #[error("partition cell ({k},{k_prime}) holds {count} snapshots (need >= 2)")]
    EmptyCell { k: usize, k_prime: usize, count: usize },
    #[error("observed parameters out of partition range: {0}")]
    OutOfRange(String),
    #[error("constrained solver failed: {0}")]
    SolverFail(String),
    #[error("probe Gram matrix numerically singular (min eig {0:.3e})")]
    SingularM(f64),
    #[error("flux matrix singular: {0}")]
    SingularF(String),
    #[error("stability constant is zero; bound undefined")]
    ZeroBeta,
    #[error("Neumann data violates compatibility (mean magnitude {0:.3e})")]
    Nullspace(f64),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed store: {0}")]
    Store(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
