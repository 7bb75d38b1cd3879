//! Regression forests that localize 3D body joints in single depth images.
//!
//! The pipeline, end to end:
//!
//! 1. **`synthdata`** renders articulated capsule bodies into depth images with
//!    ground-truth joint positions (a self-contained labeled data source).
//! 2. **`training`** grows binary decision trees over depth-comparison features
//!    and fills each leaf with a few weighted relative votes per joint, found by
//!    mean-shift clustering of reservoir-sampled offsets.
//! 3. **`inference`** pushes every foreground pixel through the forest, casts
//!    the stored votes into world space, and aggregates them per joint with
//!    weighted Gaussian mean shift into ranked position hypotheses.
//! 4. **`evaluation`** scores hypotheses against ground truth with per-joint
//!    average precision and the mean across joints (mAP).
//!
//! With the `parallel` feature (default) the data-parallel inner loops run on
//! rayon; without it they fall back to sequential code. Outputs are identical
//! either way: every parallel map is order-preserving and every reduction is
//! merged in a fixed order.

pub mod dataset;
pub mod depth;
pub mod error;
pub mod evaluation;
pub mod forest;
pub mod geom;
pub mod inference;
pub mod meanshift;
pub mod reservoir;
pub mod synthdata;
pub mod training;

pub(crate) mod exec;

pub use error::{Error, Result};
pub use exec::set_max_threads;
pub use geom::{Pixel, Vec3};
