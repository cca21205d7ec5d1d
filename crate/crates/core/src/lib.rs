//! Slippage-robust gaze estimation for near-eye displays, with a ray-traced
//! synthetic eye and rig simulator that supplies exact ground truth.

pub mod calibrate;
pub mod error;
pub mod estimate;
pub mod eyemodel;
pub mod gaze;
pub mod geom;
pub mod rig;
pub mod sim;

pub use error::{Error, Result};
