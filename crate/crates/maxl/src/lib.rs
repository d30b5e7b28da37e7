//! Joint ASR+NLU training via meta auxiliary learning on synthetic
//! spoken-language data.
//!
//! The pieces: a second-order reverse-mode autodiff core ([`autodiff`]), the
//! multi-task speech network and the label-generation NLU network ([`nets`]),
//! the NLU-to-SLU target interfaces ([`interface`]), the two-stage bilevel
//! training loop ([`train`]), a deterministic synthetic corpus generator
//! ([`synthdata`]), evaluation metrics ([`evalx`]) and the experiment
//! harness ([`harness`]).

pub mod autodiff;
pub mod checkpoint;
pub mod evalx;
pub mod harness;
pub mod interface;
pub mod nets;
pub mod synthdata;
pub mod train;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code contract: 2 for config errors, 3 for numerical
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
