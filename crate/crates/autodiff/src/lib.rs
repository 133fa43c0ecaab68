//! Dense row-major tensors and a tape for reverse-mode automatic
//! differentiation, sized for small sequence models on the CPU.

pub mod archive;
mod error;
pub mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use archive::Archive;
pub use error::TensorError;
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use real::{lit, DType, Real};
pub use tape::{Gradients, Norm, Tape, Var};
pub use tensor::Tensor;
