//! Learned local path planning with B-spline control points chosen on a
//! polar occupancy grid.

pub mod dataset;
pub mod error;
pub mod grid;
pub mod nn;
pub mod planner;
pub mod point;
pub mod ppo;
pub mod sim;
pub mod svg;
pub mod spline;

pub use error::{Error, Result};
pub use point::Point2;
