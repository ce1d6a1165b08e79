//! Auxiliary-task training for semantic segmentation at desk scale.
//!
//! A shared convolutional encoder feeds a segmentation decoder (the main
//! task) and, optionally, a depth-regression decoder (the auxiliary task
//! that exists only during training). The two task losses are combined per
//! batch by fixed weights or by the adaptive balancing rules in
//! [`weighting`], and everything is differentiated by the small
//! reverse-mode engine in [`tensor`].
//!
//! The [`data`] module generates deterministic procedural road scenes so
//! experiments are reproducible byte for byte; [`trainer`] runs the Adam
//! training loop with per-epoch validation and best-checkpoint retention;
//! [`cli`] wires it all into the `auxseg` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod models;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use error::{AuxError, Result};
