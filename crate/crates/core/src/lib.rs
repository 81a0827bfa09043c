//! Object-centric structure-from-motion.
//!
//! Per-frame oriented 3D box detections with embeddings go in; metric camera
//! poses and a global object map come out. See [`pipeline::run_pipeline`].

pub mod geom;
pub mod matchcore;
pub mod twoview;
pub mod globalize;
pub mod tracks;
pub mod optimize;
pub mod simkit;
pub mod pipeline;
