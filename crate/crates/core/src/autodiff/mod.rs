//! Dense tensors and a recording tape for reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_gradient, relative_error};
pub use tape::{gelu, gelu_derivative, normal_cdf, normal_pdf, GradMap, Tape, Var};
pub use tensor::Tensor;
