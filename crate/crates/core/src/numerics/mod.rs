//! Tensors, a reverse-mode tape and the small layer library built on it.

pub mod attention;
pub(crate) mod gemm;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use attention::Attention2d;
pub use nn::{count_parameters, BatchNorm2d, Conv2d, Ctx, Linear, Mode, Module, ParamBuilder, ParamId, ParamStore, SampleNorm};
pub use optim::{Adam, AdamConfig};
pub use tape::{CustomBackward, Gradients, Tape, Var};
pub use tensor::Tensor;
