//! Error taxonomy shared across the crate.
//!
//! Every message is a single line so the CLI can emit machine-parsable
//! `error: <category>: <detail>` output.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file envelope: bad magic, unsupported version, bad header,
    /// trailing bytes, unparsable text.
    #[error("format: {0}")]
    Format(String),

    /// Declared counts disagree with the payload actually present.
    #[error("truncation: {0}")]
    Truncation(String),

    /// Well-formed container holding invalid values (non-finite floats,
    /// empty classes).
    #[error("data: {0}")]
    Data(String),

    /// A vector with near-zero norm where a direction is required.
    #[error("degenerate vector: {0}")]
    Degenerate(String),

    /// Not enough classes or samples to satisfy a request.
    #[error("capacity: {0}")]
    Capacity(String),

    /// Mismatched lengths or dimensions between paired inputs.
    #[error("shape: {0}")]
    Shape(String),

    /// A class label outside the declared range.
    #[error("label: {0}")]
    Label(String),

    /// The theoretical bound is undefined for the given statistics.
    #[error("undefined bound: {0}")]
    UndefinedBound(String),

    /// Optimization produced a non-finite loss.
    #[error("training failure: {0}")]
    Training(String),

    /// An argument violates a documented precondition.
    #[error("invalid: {0}")]
    Invalid(String),

    /// A failure localized to one episode of a benchmark run.
    #[error("episode {index}: {source}")]
    Episode {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the episode index it occurred in.
    pub fn in_episode(self, index: usize) -> Error {
        Error::Episode {
            index,
            source: Box::new(self),
        }
    }
}
