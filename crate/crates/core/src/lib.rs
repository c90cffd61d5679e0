//! Text-to-4D generation by hybrid score distillation on a dynamic radiance
//! field.

pub mod autodiff;
pub mod error;
pub mod guidance;
pub mod io;
pub mod optim;
pub mod render;
pub mod scene;
pub mod scheduler;
pub mod synthetic;
pub mod tensor;

pub use autodiff::{Differentiable, Gradients, Param, ParamKey, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
