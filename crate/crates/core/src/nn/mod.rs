//! Minimal dense-tensor engine: layer kernels with hand-written backward
//! passes and SGD-with-momentum parameters.

mod ops;
mod param;
mod real;
mod tensor;

pub use ops::*;
pub use param::Param;
pub use real::Real;
pub use tensor::Tensor;
