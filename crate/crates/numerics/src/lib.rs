//! Numerical substrate for the vlground model: dense tensors, a tape-based
//! reverse-mode differentiator with the handful of ops a Transformer needs,
//! Adam with a warmup/decay schedule, and finite-difference verification.
//!
//! Everything is generic over [`Scalar`] so the same model code can be
//! instantiated in `f64` for tight gradient checks.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use attention::SeqLayout;
pub use error::{NumericsError, Result};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport, GRAD_FLOOR};
pub use graph::{Graph, Var};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
