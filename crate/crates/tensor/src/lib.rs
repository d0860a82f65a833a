//! Dense `f32`/`f64` tensors and a tape-based reverse-mode autodiff engine
//! covering the operator set of a 3D residual classification network.

mod element;
mod error;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, relative_error, REL_FLOOR};
pub use ops::activation::log_softmax_row;
pub use ops::conv::Conv3dGeometry;
pub use ops::norm::{NormMode, RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::{Tensor, MAX_RANK};
