//! Dense tensors, the kernels the model needs, and a reverse-mode tape.

mod ops;
mod tape;
mod tensor;

pub use ops::{
    clip01, clip01_mask, clip01_scalar, gelu, gelu_derivative, gelu_scalar, layer_norm, log_softmax_rows, matmul,
    normal_cdf, softmax_rows, LAYER_NORM_EPS,
};
pub use tape::{Adjoints, ParamId, Tape, TapeNode, Var};
pub use tensor::RealTensor;
