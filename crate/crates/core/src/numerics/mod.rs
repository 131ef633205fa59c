//! Dense tensor primitives, parameter storage with Adam, and a finite-difference
//! gradient checker. All arithmetic is 64-bit.

mod gradcheck;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{
    check_gradients, check_gradients_for, relative_error, GradCheckReport, Objective, ParamCheck,
    REL_ERROR_FLOOR,
};
pub use ops::{
    gelu, gelu_grad, gelu_with_grad, layer_norm, layer_norm_affine_grad, layer_norm_forward,
    layer_norm_input_grad, normalize_into, softmax, softmax_backward, softmax_in_place,
    LayerNormCache, DEFAULT_LN_EPS,
};
pub use params::{adam_update, AdamConfig, ParamId, ParamStore};
pub use tensor::{gemm, Tensor2D};
