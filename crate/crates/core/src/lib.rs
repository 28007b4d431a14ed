//! Numerical core for pairwise social-relation prediction from face images.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithm: the
//! differentiable layer set, HOG features, seeded K-means, the bridging
//! descriptor tree, the attribute and Siamese relation networks, the
//! synthetic planted-structure generator and the evaluation metrics. File
//! formats and the command-line interface live in the `facerel` crate.
#![no_std]

extern crate alloc;

pub mod attribute;
pub mod bridge;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hog;
pub mod image;
pub mod kmeans;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod params;
pub mod relation;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
