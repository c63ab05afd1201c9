use thiserror::Error;

use crate::bundle::BundleError;
use crate::ir::IrError;
use crate::ops::KernelError;
use crate::optimizer::OptimizeError;
use crate::runtime::RuntimeError;
use crate::store::StoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error; each subsystem keeps its own error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
