//! Tilted cross-entropy losses, stochastic class-tilted training and
//! IoU-based fairness metrics for semantic segmentation.
//!
//! Modules, bottom up:
//!
//! - [`tilt`]: the tilt operator, its softmax weights, and the
//!   cross-entropy, tilted cross-entropy and focal losses on probability maps.
//! - [`diffmodel`]: per-pixel softmax classifiers with analytic gradients,
//!   a central-difference checker and momentum SGD.
//! - [`trainer`]: class-partitioned stochastic training whose class sampling
//!   distribution follows exponentially tilted running losses, plus
//!   uniform-sampling baselines.
//! - [`segmetrics`]: confusion matrices, per-class IoU and fairness summaries.
//! - [`synthseg`]: imbalanced synthetic segmentation data and its binary
//!   file format.

pub mod diffmodel;
pub mod error;
pub mod segmetrics;
pub mod synthseg;
pub mod tilt;
pub mod trainer;

pub use error::{Error, Result};
