//! Scanline warping of the source view by a disparity field, and its
//! derivative with respect to disparity.

use rayon::prelude::*;

use crate::error::{check_same_size, Error, Result};
use crate::image::Image;

/// Per-pixel disparity in pixels with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::InvalidParameter("disparity map buffer size mismatch".into()));
        }
        for (v, ok) in values.iter().zip(&valid) {
            if *ok && !(v.is_finite() && *v >= 0.0) {
                return Err(Error::InvalidParameter(format!("valid disparity {v} must be finite and >= 0")));
            }
        }
        Ok(Self { width, height, values, valid })
    }

    /// All-valid constant disparity.
    pub fn constant(width: usize, height: usize, d: f64) -> Self {
        assert!(d.is_finite() && d >= 0.0);
        Self {
            width,
            height,
            values: vec![d; width * height],
            valid: vec![true; width * height],
        }
    }

    /// Builds a fully valid map from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        let valid = values.iter().map(|v| v.is_finite() && *v >= 0.0).collect();
        Self { width, height, values, valid }
    }

    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        debug_assert_eq!(valid.len(), width * height);
        Self { width, height, values, valid }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Invalidates every pixel where `mask` is false.
    pub fn masked(&self, mask: &[bool]) -> DisparityMap {
        let valid = self.valid.iter().zip(mask).map(|(a, b)| *a && *b).collect();
        Self { valid, ..self.clone() }
    }

    pub fn with_values(&self, values: Vec<f64>) -> DisparityMap {
        Self::from_raw(self.width, self.height, values, self.valid.clone())
    }

    pub fn flip_horizontal(&self) -> DisparityMap {
        let mut values = Vec::with_capacity(self.values.len());
        let mut valid = Vec::with_capacity(self.valid.len());
        for i in 0..self.height {
            let r = i * self.width..(i + 1) * self.width;
            values.extend(self.values[r.clone()].iter().rev());
            valid.extend(self.valid[r].iter().rev());
        }
        Self::from_raw(self.width, self.height, values, valid)
    }
}

/// Interpolation cell for sampling column `x`: left index and weight of the
/// right neighbour. Integer positions use the cell `[x, x+1]` with weight 0;
/// the last column falls back to the cell on its left.
#[inline]
pub(crate) fn cell(x: f64, width: usize) -> Option<(usize, f64)> {
    if !(x >= 0.0 && x <= (width - 1) as f64) {
        return None;
    }
    let c = x.floor();
    let mut ci = c as usize;
    let mut alpha = x - c;
    if ci + 1 >= width {
        if width == 1 {
            return Some((0, 0.0));
        }
        ci = width - 2;
        alpha = 1.0;
    }
    Some((ci, alpha))
}

/// Linear interpolation of a row at real column `x`; `None` out of bounds.
#[inline]
pub(crate) fn sample_row(row: &[f64], x: f64) -> Option<f64> {
    let (c, a) = cell(x, row.len())?;
    if a == 0.0 {
        return Some(row[c]);
    }
    Some((1.0 - a) * row[c] + a * row[c + 1])
}

/// Reconstructs the reference view by sampling `source` at `(i, j - d(i,j))`
/// with linear interpolation along the row. Pixels whose sample falls outside
/// the image, or whose disparity is invalid, are masked out (value 0).
pub fn warp_scanline(source: &Image, disparity: &DisparityMap) -> Result<(Image, Vec<bool>)> {
    check_same_size(source.dims(), disparity.dims())?;
    let (w, h) = source.dims();
    let mut out = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    out.par_chunks_mut(w.max(1))
        .zip(mask.par_chunks_mut(w.max(1)))
        .enumerate()
        .for_each(|(i, (orow, mrow))| {
            let src = source.row(i);
            for j in 0..w {
                if !disparity.is_valid(i, j) {
                    continue;
                }
                if let Some(v) = sample_row(src, j as f64 - disparity.get(i, j)) {
                    orow[j] = v;
                    mrow[j] = true;
                }
            }
        });
    Ok((Image::from_raw(w, h, out), mask))
}

/// Derivative of the warped value with respect to the disparity at the same
/// pixel: `-(src[c+1] - src[c])` for the active interpolation cell, 0 where
/// masked.
pub fn warp_grad(source: &Image, disparity: &DisparityMap) -> Result<Image> {
    check_same_size(source.dims(), disparity.dims())?;
    let (w, h) = source.dims();
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w.max(1)).enumerate().for_each(|(i, orow)| {
        let src = source.row(i);
        for j in 0..w {
            if !disparity.is_valid(i, j) || w < 2 {
                continue;
            }
            if let Some((c, _)) = cell(j as f64 - disparity.get(i, j), w) {
                orow[j] = -(src[c + 1] - src[c]);
            }
        }
    });
    Ok(Image::from_raw(w, h, out))
}
