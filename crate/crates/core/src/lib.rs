//! Collaborative ensemble adversarial training on a small reverse-mode
//! autodiff engine.
//!
//! The crate covers tensors and gradients, MLP/CNN members, dataset loaders and
//! generators, L∞ attacks, ensemble bookkeeping, the collaborative trainer,
//! evaluation reports and the `ceat` command line.

pub mod attacks;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use attacks::{AttackKind, AttackSpec, AttackTarget};
pub use autograd::{Graph, Var};
pub use data::Dataset;
pub use ensemble::Ensemble;
pub use error::{Error, Result};
pub use nn::{Arch, Layer, Model, SgdState};
pub use tensor::Tensor;
pub use trainer::{CeatConfig, Variant};
