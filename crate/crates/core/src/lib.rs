//! Online tracking of quadrangle text instances in video.
//!
//! The crate covers everything downstream of a convolutional backbone:
//! decoding per-pixel quadrangle maps into proposals, building
//! appearance-geometry descriptors, estimating their next-frame state with a
//! GRU, associating instances across frames with Kuhn-Munkres matching, and
//! scoring the resulting trajectories with CLEAR-MOT metrics.

pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod recurrent;
pub mod synthlab;
pub mod tensor;
pub mod tracker;

pub use error::{Error, Result};
