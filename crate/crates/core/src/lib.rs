//! Desk-scale active stereo laboratory.
//!
//! The crate covers the whole loop of a self-supervised active stereo
//! experiment without any learned components:
//!
//! * [`image`]: float images, local statistics, local contrast normalization.
//! * [`geometry`]: the rectified rig and depth/disparity conversions.
//! * [`synth`]: a deterministic dot-pattern renderer with ground truth.
//! * [`warp`]: scanline reconstruction of one view from the other.
//! * [`loss`]: photometric and weighted-LCN costs, adaptive support weights.
//! * [`volume`]: cost volumes with soft-argmin and WTA readouts.
//! * [`matcher`]: end-to-end matching and direct disparity refinement.
//! * [`invalidation`]: left-right checks, confidence maps, average precision.
//! * [`eval`]: plane fitting, bias/jitter, subpixel precision, error curves.
//! * [`io`]: PFM / PGM / PNG and JSON helpers.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod invalidation;
pub mod io;
pub mod loss;
pub mod matcher;
pub mod synth;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::CameraRig;
pub use image::{Image, LocalStats, NormalizedImage};
pub use loss::{AswParams, CostMap};
pub use volume::CostVolume;
pub use warp::DisparityMap;
