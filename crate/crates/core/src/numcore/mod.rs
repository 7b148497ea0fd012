//! Dense tensors, reverse-mode differentiation, initialization and the
//! Adam + warmup-stable-decay optimizer.

mod init;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use init::{derived_rng, gaussian, glorot_uniform, seeded_rng, uniform, SeededRng};
pub use optim::{adam_step, schedule_lr, AdamState, Param, WsdSchedule};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

