//! Occluded cloth-changing person re-identification at desk scale.
//!
//! The crate covers the whole pipeline: synthetic and on-disk datasets,
//! occluded-dataset synthesis from parsing maps, a part-quality screening
//! model with hand-written backpropagation, the part-averaged triplet and
//! clothes-adversarial objectives, and CMC/mAP evaluation under
//! cloth-changing protocols.

pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod model;
pub mod occlusion;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
