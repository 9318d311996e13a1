//! Augmented cyclic adversarial learning for low-resource domain adaptation.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: `f64` tensors, a define-by-run autodiff graph and a
//!   finite-difference gradient oracle.
//! * [`nets`]: generator, discriminator and classifier builders plus a binary
//!   checkpoint format.
//! * [`objectives`]: adversarial, reconstruction, relaxed-cycle and
//!   task-augmented losses and the variant registry that composes them.
//! * [`trainer`]: source pretraining and the alternating
//!   discriminator/generator/task-model update schedule.
//! * [`data`]: procedural glyph domains, IDX ingestion and sampling.
//! * [`eval`]: accuracy, the multi-variant ablation harness and reports.
//! * [`sweep`]: the gradient-check sweep over every op and network.

pub mod data;
mod error;
pub mod eval;
pub mod nets;
pub mod objectives;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256, used for config and artifact fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub use tensor::{GradientMap, Graph, Tensor, TensorError, Var};
