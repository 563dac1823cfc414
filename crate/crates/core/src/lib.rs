//! Surface masked autoencoder (sMAE) pretraining for surface vision
//! transformers on icosphere meshes.
//!
//! - [`geodesy`]: icosphere hierarchies and the face-to-patch vertex table.
//! - [`tensor`]: dense tensors, reverse-mode autodiff and SGD with momentum.
//! - [`sit`]: the surface vision transformer encoder and regression head.
//! - [`ssl`]: masked autoencoder and masked patch prediction pretraining.
//! - [`tasks`]: supervised finetuning, linear probing and run comparison.
//! - [`synthcortex`]: synthetic cortical-like datasets and normalization.

pub mod tensor;
pub mod geodesy;
pub mod sit;
pub mod synthcortex;
pub mod ssl;
pub mod checkpoint;
pub mod exec;
pub mod batch;
pub mod sweep;
pub mod tasks;

mod binio;
mod error;

pub use binio::FormatError;
pub use error::{Error, Result};
