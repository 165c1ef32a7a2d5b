//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible operand shapes, naming the primitive that rejected them.
    #[error("shape mismatch in `{op}`: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A forward op or gradient produced NaN/Inf, or one was fed in.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// File did not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    /// File ended before the declared payload was complete.
    #[error("truncated file while reading {0}")]
    Truncated(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{ctx}: {source}")]
    Context {
        ctx: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with higher-level context (e.g. which decoder layer
    /// produced a non-finite value).
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        Error::Context {
            ctx: ctx.into(),
            source: Box::new(self),
        }
    }
}
