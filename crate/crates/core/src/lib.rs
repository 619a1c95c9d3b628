//! Flood-water segmentation with a hybrid vision-transformer / CNN network.
//!
//! The crate is self-contained: [`tensor`] provides dense `f64` tensors and a
//! reverse-mode gradient tape, [`model`] builds the two-branch network on top
//! of it, [`metrics`] scores binary masks (Flood Capacity, IoU, pixel
//! accuracy), [`data`] handles manifests, PNG loading and synthetic scenes,
//! [`train`] runs Adam with deep supervision, and [`cli`] wires it all into
//! the `floodseg` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
