//! Small tensor and neural-network engine: dense, convolutional and LSTM
//! layers with reverse-mode gradients for both parameters and inputs,
//! temperature softmax, cross-entropy and RMSProp training.

mod gradcheck;
pub mod io;
mod layers;
mod linalg;
mod loss;
mod model;
mod tensor;
mod train;

pub use gradcheck::{finite_diff_gradient, max_relative_error};
pub use layers::{Activation, LayerSpec, KERNEL};
pub use loss::{cross_entropy, softmax, softmax_rows, PROB_FLOOR};
pub use model::{Mode, NeuralModel};
pub use tensor::Tensor;
pub use train::{rmsprop_step, train, RmsProp, TrainConfig, TrainOutcome};
