//! Dense distinct queries for end-to-end object detection.
//!
//! Building blocks: box geometry, feature pyramids with pyramid shuffle and dense
//! query sites, distinct query selection (class-agnostic NMS), one-to-one and soft
//! one-to-many assignment, losses, detection metrics, and a crowded-scene simulator
//! that exercises them end to end.

pub mod assignment;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod pyramid;
pub mod selection;
pub mod simulator;

pub use error::{Error, Result};
pub use geometry::BBox;
