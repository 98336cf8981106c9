//! Desk-scale SOUP-GAN and CSR-GAN super-resolution models for MR-like
//! images, built on a small deterministic autodiff engine.

pub mod arch;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Tape, Tensor, Var};
