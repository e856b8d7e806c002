//! Differentiable simulation of a programmable 4f snapshot microscope, global
//! Fourier-domain reconstruction networks, and the sharded loops that train
//! both together.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fourier;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optics;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Data, Tensor};
