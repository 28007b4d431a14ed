//! Dataset formats, checkpoints and the command-line stages around
//! `facerel-core`.

pub mod ablation;
pub mod artifacts;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod images;
pub mod manifest;
pub mod pipeline;

pub use facerel_core;
