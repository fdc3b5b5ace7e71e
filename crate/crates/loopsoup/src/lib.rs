//! Poisson loop-soup percolation on Z^d.
//!
//! The crate builds the model bottom-up: window geometry ([`lattice`]), loop
//! weights and per-length mass tables ([`loop_model`]), exact Poisson samplers
//! with a coupled arrival process ([`sampler`]), open-edge clusters
//! ([`clusters`]), Monte Carlo threshold and tail estimators ([`estimators`]),
//! and the renormalization-style goodness/frame machinery ([`multiscale`]).
//! Every stochastic component is pinned to closed forms on tiny windows by the
//! dense [`oracle`] module, and the [`cli`] module packages the experiments
//! behind a deterministic manifest-first command line.

pub mod clusters;
pub mod estimators;
pub mod lattice;
pub mod loop_model;
pub mod multiscale;
pub mod oracle;
pub mod rng;
pub mod sampler;

pub mod cli;

use thiserror::Error;

/// Crate-wide error type. Variants mirror the documented failure modes of the
/// public operations; everything else panics (programmer error).
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("window capacity exceeded: {requested} sites > 2^31")]
    Capacity { requested: u128 },

    #[error("margin rule violated: need window margin >= {needed}, have {have}")]
    Margin { needed: i64, have: i64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cache key mismatch: {0}")]
    CacheKey(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
