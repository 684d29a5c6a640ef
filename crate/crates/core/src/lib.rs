//! Metric-scale visual odometry for rigidly bundled, arbitrarily arranged
//! multi-camera rigs, plus a deterministic rig simulator used as ground truth.

pub mod backend;
pub mod descriptor;
pub mod dataset;
pub mod frontend;
pub mod geometry;
pub mod eval;
pub mod init;
pub mod io;
pub mod loop_closure;
pub mod pipeline;
pub mod sim;
