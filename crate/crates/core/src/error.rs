use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by primitive `{primitive}`")]
    NonFinite { primitive: &'static str },

    #[error("finite-difference evaluation is non-finite at coordinate {index}")]
    NonFiniteDifference { index: usize },

    #[error("objective must reduce to a 1x1 scalar, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("patch id {patch} out of range for an atlas of {patches} patches")]
    PatchOutOfRange { patch: usize, patches: usize },

    #[error("degenerate jacobian: |J_u x J_v| = {norm:e} (collapsed or creased patch)")]
    DegenerateJacobian { norm: f64 },

    #[error("degenerate neighborhood: {0}")]
    DegenerateNeighborhood(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("patch {patch} has {available} candidate neighbors, {required} required")]
    NeighborhoodTooSmall {
        patch: usize,
        available: usize,
        required: usize,
    },

    #[error("patch {patch} has non-positive area {area:e}")]
    NonPositiveArea { patch: usize, area: f64 },

    #[error("stitching needs at least two patches")]
    SinglePatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gradient of loss term `{term}` is non-finite")]
    NonFiniteGradient { term: &'static str },

    #[error("fit diverged at iteration {iter}: loss {loss:e} exceeded 1e3 x reference {reference:e} for {streak} iterations")]
    Diverged {
        iter: usize,
        loss: f64,
        reference: f64,
        streak: usize,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
