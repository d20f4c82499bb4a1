//! Human point-cloud video understanding at desk scale.
//!
//! The crate covers the whole pipeline: procedural actors scanned by a
//! simulated LiDAR (with body-part and motion-flow ground truth), body-part
//! patchification with spatio-temporal masking, a small reverse-mode
//! differentiation kernel, the masked-reconstruction pretraining model and
//! its fine-tuning heads, training loops, metrics and file formats.

pub mod geom;
pub mod io;
pub mod model;
pub mod patchmask;
pub mod rng;
pub mod synthgen;
pub mod tensornet;
pub mod train;
