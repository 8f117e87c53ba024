//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Covers every operation the representation stack and the PPO objective
//! need: matrix products (plain and batched), elementwise arithmetic with
//! scalar broadcast, the usual activations, (masked) row softmax, feature
//! concatenation, reductions and norms, Gaussian log-density and
//! reparameterized sampling. All other shape coercions are explicit
//! (`reshape`, `tile_last`, `expand_leading`).

mod check;
mod error;
pub mod init;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{evaluate, finite_difference_check, gradient, Bindings};
pub use error::{NumericsError, Result};
pub use optim::{clip_global_norm, Adam};
pub use params::{ParamEntry, ParamGroup};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
