//! Interest-graph conversion for implicit-feedback recommendation.
//!
//! The crate turns an unweighted user-item interaction graph into a weighted
//! interest graph by gradient matching: a small generative model produces a
//! weight in `[0, 1]` for every sampled user-item pair, and its parameters are
//! optimized so that the gradients of a weighted alignment/uniformity (WAU)
//! objective on the generated weights track the gradients produced by the raw
//! interactions. Embedding encoders (a lookup table, or light graph
//! convolution), the WAU/BPR objectives with analytic gradients, the matcher
//! loop, and a top-K ranking evaluation harness are all included.
//!
//! The `qgrace` binary exposes the pipeline as subcommands: `prepare`,
//! `train`, `evaluate`, `noise-sweep`, `alpha-sweep`, `dump-interests`.

pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod interest;
pub mod loss;
pub mod math;
pub mod matcher;
pub mod synthetic;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty interaction input")]
    EmptyInput,

    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios([f64; 3]),

    #[error("negative sampling exhausted for user {user}: adjacent to all items")]
    SamplingExhausted { user: u32 },

    #[error("could not place {requested} noise edges after {attempts} attempts; graph too dense")]
    NoiseSaturated { requested: usize, attempts: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate vector: norm {norm:e} below {eps:e}")]
    DegenerateNorm { norm: f64, eps: f64 },

    #[error("missing retained sample state for VAE backward")]
    MissingVaeState,

    #[error("training diverged at round {round}: {what} is non-finite")]
    Diverged { round: usize, what: String },

    #[error("no evaluable users (every user lacks train or test items)")]
    NoEvaluableUsers,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    BadFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
