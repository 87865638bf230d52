//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records each op as it is evaluated (define-by-run), so a
//! recurrent model simply unrolls into more nodes. Learnable tensors live in
//! a [`ParamStore`]; [`Tape::param`] copies them onto the tape and
//! [`Tape::backward_into`] accumulates gradients back into the store, where
//! [`Adam`] consumes them.
//!
//! ```
//! use osats_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.input(Tensor::scalar(0.0));
//! let y = tape.sigmoid(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap()[0], 0.25);
//! ```

mod gemm;
pub mod gradcheck;
pub mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    grad_check, grad_check_params, op_catalogue, CatalogueCase, GradCheckConfig, GradCheckReport,
};
pub use optim::{adam_update, Adam, AdamConfig, Moments};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NaNDetected(&'static str),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
