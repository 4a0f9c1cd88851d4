//! A small differentiable layer kit: tensors and parameter sets, the text CNN
//! layers with hand-written backward passes, momentum SGD, a central
//! difference gradient checker and the checkpoint container.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod sgd;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use gradcheck::{grad_check, grad_check_floor, rel_error, rel_error_floor};
pub use layers::{
    conv_text, conv_text_backward, fully_connected, fully_connected_backward, maxpool_time, relu,
    relu_backward, ConvGrads, Dropout, FcGrads, MaxPool, Mode,
};
pub use sgd::{lr_at, sgd_step, SgdConfig};
pub use tensor::{LayerParams, Param, Tensor};
