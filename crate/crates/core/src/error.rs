use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Axis, Shape};

/// Errors raised by the tensor kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: {axis} axis mismatch (expected {expected}, found {found})")]
    Dim {
        op: &'static str,
        axis: Axis,
        expected: usize,
        found: usize,
    },
    #[error("tensor extents must all be >= 1, got {0}")]
    EmptyExtent(Shape),
    #[error("data length {found} does not match shape {shape}")]
    DataLength { shape: Shape, found: usize },
    #[error("{op}: shapes {lhs} and {rhs} are not broadcastable")]
    Broadcast {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error(
        "conv2d: dilated kernel extent {kernel_extent} exceeds padded input extent {padded_extent}"
    )]
    KernelTooLarge {
        kernel_extent: usize,
        padded_extent: usize,
    },
    #[error("conv2d: kernel must be square, got {kh}x{kw}")]
    NonSquareKernel { kh: usize, kw: usize },
    #[error("conv2d: stride and dilation must be >= 1")]
    ZeroStride,
    #[error("{op}: {axis} extent {extent} must be even")]
    OddExtent {
        op: &'static str,
        axis: Axis,
        extent: usize,
    },
    #[error("{0}: empty input list")]
    EmptyList(&'static str),
    #[error("channel range {start}..{} out of bounds for {channels} channels", start + len)]
    ChannelRange {
        start: usize,
        len: usize,
        channels: usize,
    },
    #[error("batch range {start}..{} out of bounds for batch of {batch}", start + len)]
    BatchRange { start: usize, len: usize, batch: usize },
    #[error("softmax needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: expected a (n, c, 1, 1) vector tensor, got {shape}")]
    NotVector { op: &'static str, shape: Shape },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("graph node {node} references a parent {parent} that is not older than itself")]
    Cycle { node: usize, parent: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found}, expected {expected}")]
    ParamShape {
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("training diverged at epoch {epoch}: non-finite gradient in parameter `{param}`")]
    DivergedGradient { epoch: usize, param: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("not an EAMC file")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint version {found} cannot be migrated; this build reads version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Epoch at which training diverged, if this is a divergence error.
    pub fn diverged_epoch(&self) -> Option<usize> {
        match self {
            Error::Diverged { epoch, .. } | Error::DivergedGradient { epoch, .. } => Some(*epoch),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
