//! Parameter-efficient transfer learning (PETL) over miniature encoders.
//!
//! The crate is `no_std` with `alloc`. It contains everything that is pure
//! computation:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation, the numeric
//!   kernels, and the AdamW optimizer.
//! - [`backbone`]: post-LN transformer and macaron conformer encoders with a
//!   named parameter registry, layer truncation and the MLP task head.
//! - [`petl`]: Adapter, Prompt, Prefix, BitFit, SSF and LoRA as injection
//!   passes, plus reparameterization merges for SSF and LoRA.
//! - [`accounting`]: closed-form trainable-parameter counts and registry audits.
//! - [`harness`]: seeded synthetic tasks, the training loop, evaluation metrics
//!   and bootstrap confidence intervals.
//!
//! File formats, configuration files and the command line live in the
//! companion `petl` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod accounting;
pub mod backbone;
mod error;
pub mod harness;
pub mod init;
pub mod petl;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
