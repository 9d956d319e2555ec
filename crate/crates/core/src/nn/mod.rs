//! Dense numeric substrate: tensors, feed-forward layers, losses, the
//! adaptive-moment optimizer, finite-difference checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{cosine_sim, log_sum_exp, softmax, softmax_cross_entropy};
pub use mlp::{Activation, Linear, Mlp, MlpCache};
pub use optim::{Adam, LrSchedule};
pub use params::Parameters;
pub use tensor::Tensor;
