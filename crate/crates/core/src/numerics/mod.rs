//! Dense tensors, the gradient tape, and the primitive operations everything
//! else is composed from.

pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use ops::{conv2d, layer_norm, pixel_shuffle, softmax};
pub use param::{Binder, ParamStore, Parameter, SpectralState};
pub use spectral::{spectral_normalize, top_singular_value, SpectralNormalized};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, DType, Scalar, Tensor};
