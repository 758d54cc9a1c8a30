//! Visual text representations for small sequence-to-sequence models.
//!
//! Text is rasterized to a grayscale line image, cut into overlapping
//! full-height windows, and embedded by a small convolutional front-end in
//! place of a token embedding table. The crate also has the subword
//! baselines, noise injectors and the BLEU harness used to compare them.

// Index loops mirror the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod corpus;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod model;
pub mod noise;
pub mod optim;
pub mod render;
pub mod rng;
pub mod segmentation;
pub mod slicer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
