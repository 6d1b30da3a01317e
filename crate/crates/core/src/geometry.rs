//! Rectified stereo rig and depth/disparity conversions.
//!
//! The left camera is the reference and sits at the origin looking down +Z.
//! The right camera is translated by `baseline` along +X, so a point seen at
//! column `j` in the left image appears at column `j - d` in the right one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    /// Focal length in pixels.
    pub focal_px: f64,
    /// Distance between the two camera centers in meters.
    pub baseline_m: f64,
}

impl CameraRig {
    pub fn new(focal_px: f64, baseline_m: f64) -> Result<Self> {
        let rig = Self { focal_px, baseline_m };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0 && self.focal_px.is_finite()) {
            return Err(Error::InvalidParameter(format!("focal must be > 0, got {}", self.focal_px)));
        }
        if !(self.baseline_m > 0.0 && self.baseline_m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "baseline must be > 0, got {}",
                self.baseline_m
            )));
        }
        Ok(())
    }

    /// `b * f`, the disparity-depth product.
    pub fn bf(&self) -> f64 {
        self.baseline_m * self.focal_px
    }

    /// Direction (unnormalized, z = 1) of the ray through a pixel center.
    /// The principal point is the image center.
    pub fn pixel_ray(&self, row: f64, col: f64, width: usize, height: usize) -> [f64; 3] {
        let cx = (width as f64 - 1.0) * 0.5;
        let cy = (height as f64 - 1.0) * 0.5;
        [(col - cx) / self.focal_px, (row - cy) / self.focal_px, 1.0]
    }
}

pub fn disparity_to_depth(d: f64, rig: &CameraRig) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidDisparity(d));
    }
    Ok(rig.bf() / d)
}

pub fn depth_to_disparity(z: f64, rig: &CameraRig) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::InvalidDepth(z));
    }
    Ok(rig.bf() / z)
}

/// Depth error for a disparity error of `delta` pixels at depth `z`:
/// `delta * z^2 / (b f)`.
pub fn expected_depth_error(z: f64, delta: f64, rig: &CameraRig) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::InvalidDepth(z));
    }
    if !(delta >= 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be >= 0, got {delta}")));
    }
    Ok(delta * z * z / rig.bf())
}
