//! Physical operators: vectors, kernels, the kernel registry and fused stage execution.

pub mod kernels;
pub mod registry;
mod stage;
mod vector;

use thiserror::Error;

pub use kernels::{sigmoid, Scratch};
pub use registry::{Kernel, KernelEntry, Mode, OpKind, Signature};
pub use stage::{Loc, OpDesc, PhysicalStage, StageDescriptor, Workspace};
pub use vector::{DataVector, Input, Repr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("no registered implementation for {0}")]
    Unregistered(String),
    #[error("unknown kernel key `{0}`")]
    UnknownKey(String),
    #[error("n{node}: kernel {kernel} cannot use {found} parameters")]
    WrongParams {
        node: u32,
        kernel: String,
        found: &'static str,
    },
    #[error("n{node}: parameters unavailable: {reason}")]
    Params { node: u32, reason: String },
    #[error("n{node}: kernel has no parameters bound")]
    MissingParams { node: u32 },
    #[error("n{node} ({kind}): expected {expected} input, got {found}")]
    InputMismatch {
        node: u32,
        kind: &'static str,
        expected: &'static str,
        found: &'static str,
    },
    #[error("n{node}: length mismatch, expected {expected}, got {found}")]
    LengthMismatch { node: u32, expected: usize, found: usize },
    #[error("n{node}: output of length {needed} exceeds the trained bound {bound}")]
    Capacity { node: u32, bound: usize, needed: usize },
    #[error("n{node}: invalid operand location")]
    BadLoc { node: u32 },
}
