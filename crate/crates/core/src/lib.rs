//! Mixture-of-modality-experts (MOME) transformer for multiparametric 3D
//! volumes, trained from scratch on top of a frozen randomly initialized
//! backbone, plus the attribution and statistical evaluation tooling used to
//! study it.
//!
//! Layout:
//! - [`tensor`]: dense tensors and a reverse-mode gradient tape
//! - [`arch`]: model configuration, parameters, forward pass, checkpoints
//! - [`train`]: loss, Adam with cosine schedule, augmentation, test-time augmentation
//! - [`data`]: synthetic study generator, preprocessing, dataset files
//! - [`attribution`]: integrated gradients and modality Shapley values
//! - [`eval`]: classifier metrics, bootstrap, decision curves

pub mod arch;
pub mod attribution;
pub mod data;
mod error;
pub mod eval;
pub mod io;
pub mod tensor;
pub mod train;

pub use error::{MomeError, Result};
pub use tensor::{Tape, Tensor, Var};
