//! Hierarchical cell-to-tissue graph construction and classification.
//!
//! The crate builds two-level graph representations of histology-style
//! images — a cell graph over nuclei and a tissue graph over merged
//! superpixel regions, coupled by a binary assignment matrix — and trains a
//! hierarchical message-passing network (GIN or PNA layers, jumping
//! knowledge, sum readout) on them with a hand-rolled, gradient-checked
//! f64 engine.

pub mod dataset;
pub mod error;
pub mod entity;
pub mod features;
pub mod gnn;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod stain;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::RgbImage;
pub use stain::StainBasis;
pub use tensor::Tensor;
