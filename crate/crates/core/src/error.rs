use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the KEM library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions {0:?}: every axis must be positive")]
    InvalidDims([usize; 3]),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimsMismatch { expected: [usize; 3], found: [usize; 3] },

    #[error("size mismatch: expected {expected} elements, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("sidecar not found: {0}")]
    MissingSidecar(PathBuf),

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("constant volume cannot be normalized (value {0})")]
    ConstantVolume(f64),

    #[error("invalid value range ({min}, {max})")]
    InvalidRange { min: f64, max: f64 },

    #[error("mask value at voxel {index} is not 0 or 1")]
    NonBinaryMask { index: usize },

    #[error("label {label} at voxel {index} outside 1..={classes}")]
    InvalidLabel { index: usize, label: u8, classes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("only {distinct} distinct values for {classes} clusters")]
    TooFewDistinct { distinct: usize, classes: usize },

    #[error("sample set is empty")]
    EmptySample,

    #[error("SPE curve is empty")]
    EmptyCurve,

    #[error("regression design is singular (condition number {0:e})")]
    SingularDesign(f64),

    #[error("component count mismatch: {0} vs {1}")]
    ComponentMismatch(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
