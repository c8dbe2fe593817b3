//! Skeleton-based ataxic gait detection and severity regression.
//!
//! The pipeline runs downstream of pose estimation:
//!
//! 1. [`skeleton`] parses and repairs 18-joint keypoint sequences.
//! 2. [`cycles`] splits a walk into gait cycles from the inter-ankle distance.
//! 3. [`graph`] compiles the skeleton into spatial-configuration partitioned
//!    adjacency matrices.
//! 4. [`autodiff`] is a small dense tensor engine with reverse-mode gradients.
//! 5. [`model`] assembles spatiotemporal graph convolution blocks into the
//!    10-block backbone and its truncated variants; [`checkpoint`] persists them.
//! 6. [`train`] fine-tunes truncated models and runs the truncation search.
//! 7. [`eval`] holds metrics and grouped, stratified k-fold cross-validation.
//! 8. [`synth`] generates synthetic walkers for tests and desk-scale runs.
//!
//! Interchangeable pieces (signal filters, learning tasks) are trait objects
//! looked up by name in small registries so the CLI can select them at runtime.

pub mod autodiff;
pub mod checkpoint;
pub mod cycles;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod rng;
pub mod skeleton;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
