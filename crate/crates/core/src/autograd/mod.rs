//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every op in evaluation order; [`Graph::backward`] walks the
//! tape in reverse. Learned weights live in a [`ParamBundle`] and are bound into a
//! graph by name with [`Graph::param`].

mod checkpoint;
mod gradcheck;
mod graph;
mod nn;
mod optim;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Graph, Padding, RigidTransform, Var};
pub use nn::{dense_layer, gru_cell, ParamBundle};
pub use optim::{AdamState, Grads, LrSchedule};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0:?} is not in the bundle")]
    MissingParam(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests;
