//! Dense tensors, the MLP policy network, reverse-mode gradients and AdamW.

mod adamw;
mod mlp;
mod tape;
mod tensor;

pub use adamw::AdamW;
pub use mlp::PolicyNet;
pub(crate) use mlp::{read_u32, read_u64};
pub use tape::{Tape, Var};
pub use tensor::{log_softmax_in_place, log_sum_exp, softmax_rows, DenseMatrix};
