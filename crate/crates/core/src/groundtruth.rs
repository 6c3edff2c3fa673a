//! Signed per-pixel inverse-depth error between two renders of one view.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::raster::FeatureImageSet;

/// Signed inverse-depth error with its validity mask. Used both for the
/// reference error and for network predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorImage {
    pub delta: Image<f64>,
    pub mask: Mask,
}

impl ErrorImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            delta: Image::filled(width, height, 1, 0.0),
            mask: Image::filled(width, height, 1, false),
        }
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn crop(&self, col0: usize, row0: usize, width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            delta: self.delta.crop(col0, row0, width, height)?,
            mask: self.mask.crop(col0, row0, width, height)?,
        })
    }

    /// Single-precision copy of `delta`, for file output.
    pub fn delta_f32(&self) -> Image<f32> {
        let data = self.delta.data().iter().map(|&v| v as f32).collect();
        Image::from_vec(self.width(), self.height(), 1, data).expect("same shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthConfig {
    /// Scaling constant applied to inverse depths.
    pub scale: f64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl GroundTruthConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    /// Disparity units for a stereo rig: scale = fx * baseline.
    pub fn disparity(fx: f64, baseline: f64) -> Result<Self> {
        Self::new(fx * baseline)
    }
}

/// `delta = A * (1/d_cam - 1/d_ref)` wherever both renders cover the pixel.
///
/// Positive values mean the camera surface is nearer than the reference.
pub fn compute_gt(
    camera: &FeatureImageSet,
    laser: &FeatureImageSet,
    cfg: &GroundTruthConfig,
) -> Result<ErrorImage> {
    if camera.width() != laser.width() || camera.height() != laser.height() {
        return Err(Error::Shape(format!(
            "camera render is {}x{}, reference render is {}x{}",
            camera.width(),
            camera.height(),
            laser.width(),
            laser.height()
        )));
    }
    let mask = camera.mask.and(&laser.mask)?;
    let delta = camera
        .inverse_depth
        .data()
        .iter()
        .zip(laser.inverse_depth.data())
        .zip(mask.data())
        .map(|((&ic, &il), &valid)| {
            if valid {
                cfg.scale * (ic as f64 - il as f64)
            } else {
                0.0
            }
        })
        .collect();
    Ok(ErrorImage {
        delta: Image::from_vec(camera.width(), camera.height(), 1, delta)?,
        mask,
    })
}
