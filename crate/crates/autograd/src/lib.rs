//! Dense `f64` tensors with a dynamic tape for reverse-mode differentiation.
//!
//! The [`Graph`] records every operation of a forward pass. Parameters live in
//! a [`ParamStore`] and are bound onto a fresh graph per pass, so independent
//! graphs can be built concurrently from the same store.

mod attention;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod params;
pub mod suite;
mod tensor;

pub use attention::{multi_head_attention, AttentionWeights};
pub use error::TensorError;
pub use gradcheck::{grad_check, grad_check_subset, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{AttentionRecord, CustomOp, Graph, Var, MASKED_LOGIT};
pub use params::{BoundParams, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use kernels::sigmoid;
pub use tensor::Tensor;
