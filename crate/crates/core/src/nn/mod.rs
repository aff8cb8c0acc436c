//! A small differentiable engine over 5-axis tensors `(n, c, d, h, w)`,
//! restricted to the layers the segmentation networks use.

mod exec;
pub mod gradcheck;
pub mod ops;
mod params;
mod real;
mod tensor;

pub use exec::{Eval, Exec, InputGrads, NodeId, Tape, NORM_EPS};
pub use params::{ConvLayer, NormLayer, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor5;
