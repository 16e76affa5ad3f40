//! Differentiable compute core shared by both models.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{compare_gradients, grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use layers::{gru_cell_step, softmax_xent, BiGru, GruCell, Linear};
pub use params::{GradientMap, ParamId, ParameterSet, INIT_STD};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
