//! Small deterministic feed-forward toolkit with hand-written backprop.

pub mod gradcheck;
mod mlp;
mod ops;
mod tensor;

pub use mlp::{sigmoid, Activation, Dense, Mlp, MlpTrace};
pub(crate) use ops::masked_softmax_into;
pub use ops::{
    bce_loss, l2_rec_loss, masked_softmax, optimizer_step, softmax, softmax_backward, PROB_EPS,
};
pub use tensor::{dot, Matrix, ParamTensor, Parameterized};
