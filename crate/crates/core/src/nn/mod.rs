//! Minimal deterministic dense-network engine.

pub mod grad;
mod layer;
pub(crate) mod matrix;
mod network;
mod params;

pub use grad::{fd_check, grad_scalar, Aux, ObjectiveKind, Reduction, ValueAndGrad};
pub use layer::{Activation, DenseLayer};
pub use matrix::Matrix;
pub use network::{Network, Trace};
pub use params::{sgd_step, FlatParams, HeadId, LayerId, ParamLayout, Segment};
