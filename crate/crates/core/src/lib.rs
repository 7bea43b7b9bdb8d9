//! Multi-robot socially-aware navigation workbench.
//!
//! A circle-crossing crowd simulator with acceleration-controlled robots,
//! ORCA pedestrians, a spatial-temporal transformer encoder for each robot's
//! local history, and a hierarchical (waypoint + local action) MAPPO trainer.

pub mod encoder;
pub mod env;
pub mod episode_log;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod marl;
pub mod nn;
pub mod pedestrian;
pub mod scenario;

pub use error::{Error, Result};
