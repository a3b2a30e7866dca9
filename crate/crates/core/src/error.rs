//! Crate-wide error type.
//!
//! Variants are grouped by failure class so callers (notably the CLI) can map
//! them onto coarse categories: configuration mistakes, data problems, and
//! numeric failures.

use thiserror::Error;

/// Any failure surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model / run configuration (bad dimensions, unknown keys,
    /// incompatible switches).
    #[error("config error: {0}")]
    Config(String),

    /// Image or patch-grid geometry violation (patch size does not divide the
    /// image side, non-square input, channel mismatch).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Tensor shape mismatch between two operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// A mask plan cannot be satisfied (e.g. disjoint masks with ratio > 0.5).
    #[error("infeasible mask plan: {0}")]
    Infeasible(String),

    /// Problems with datasets, manifests, rasters, or other stored artifacts.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric guard tripped: non-finite loss, zero-norm vector where a
    /// direction is required, and similar.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn infeasible(msg: impl Into<String>) -> Self {
        Error::Infeasible(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
