//! Convolutional dictionary learning with an unrolled sparse encoder.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod conv;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grads;
pub mod io;
pub mod par;
pub mod sim;
pub mod train;

pub use conv::{apply_dict, apply_dict_adjoint, estimate_lipschitz, filter_gradient, shrink, CodeMap, DictOperator, FilterBank};
pub use encoder::{encode, encode_batch, EncoderConfig, EncoderMode, FistaTrace};
pub use error::{Error, Result};
pub use grads::{grad_h, grad_lambda, loss_h, loss_lambda, GammaPrior};
pub use par::Execution;
pub use sim::{simulate, Dataset, SimConfig};
pub use train::{train, TrainConfig, TrainHistory, TrainOutcome};
