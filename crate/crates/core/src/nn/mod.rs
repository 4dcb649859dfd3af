//! Small reverse-mode differentiable MLPs, log-softmax policies, and Adam.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod softmax;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{max_relative_error, RELATIVE_FLOOR};
pub use mlp::{Activation, ForwardCache, LayerShape, Mlp, MlpSpec, ParamTensor};
pub use softmax::{log_sigmoid, log_softmax_backward, log_softmax_policy, log_softmax_rows, sigmoid, softmax_rows};
