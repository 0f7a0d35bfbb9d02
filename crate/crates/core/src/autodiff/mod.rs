//! Minimal reverse-mode automatic differentiation.
//!
//! Values are fp64 throughout; parameter blobs on disk are fp32.

mod session;
mod tape;
mod tensor;

pub use session::{Activations, Mode, Session, Sgd, BN_MOMENTUM};
pub use tape::{sign, smooth_l1, BatchMoments, BnStats, Grads, Tape, Var};
pub use tensor::Tensor;
