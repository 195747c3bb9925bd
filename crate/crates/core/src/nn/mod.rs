//! Minimal dense neural-network core with hand-written reverse-mode
//! gradients for the layers the classifier needs.

mod adadelta;
mod checkpoint;
mod layers;
mod tensor;

pub use adadelta::{AdadeltaState, RowAdadelta, DEFAULT_EPSILON, DEFAULT_RHO};
pub use checkpoint::{Checkpoint, TensorEntry};
pub use layers::{
    conv1d, conv1d_backward, dense_backward, dense_forward, dropout, embedding_lookup, log_sigmoid, maxpool_backward,
    maxpool_columns, maxpool_windowed, sigmoid, softmax, Activation, DenseLayer, FilterBank, Mode,
};
pub use tensor::Tensor;
