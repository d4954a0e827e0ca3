//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row}, column {col}: cannot parse {value:?} as a number")]
    NonNumericCell { row: usize, col: usize, value: String },

    #[error("row {row}, column {col}: non-finite feature value")]
    NonFiniteFeature { row: usize, col: usize },

    #[error("label column {0:?} not found")]
    LabelColumnNotFound(String),

    #[error("dataset has {0} classes; at least 2 are required")]
    TooFewClasses(usize),

    #[error("dataset has {0} samples; at least 2 are required")]
    TooFewSamples(usize),

    #[error("labeled count {l} out of range: need class count {c} <= l <= sample count {n}")]
    LabeledCountRange { l: usize, c: usize, n: usize },

    #[error("could not cover all classes with {l} labeled samples after {attempts} attempts")]
    ClassCoverageUnreachable { l: usize, attempts: usize },

    #[error("noise count {q} exceeds labeled count {l}")]
    NoiseExceedsLabeled { q: usize, l: usize },

    #[error("label config already carries injected noise")]
    NoiseAlreadyPresent,

    #[error("{c} classes do not fit on the corners of a {dims}-dimensional hypercube")]
    TooManyClassesForCorners { c: usize, dims: usize },

    #[error("invalid split file: {0}")]
    InvalidSplit(String),

    #[error("k = {k} must satisfy 1 <= k < n = {n}")]
    InvalidK { k: usize, n: usize },

    #[error("epsilon policy requires sigma > 0, got {0}")]
    InvalidSigma(f64),

    #[error("class {0} has no labeled node, so no particle can represent it")]
    ClassWithoutParticle(usize),

    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error("parameter grid for {0} is empty")]
    EmptyGrid(&'static str),

    #[error("experiment spec error: {0}")]
    InvalidSpec(String),

    #[error("result table is empty")]
    EmptyTable,
}
