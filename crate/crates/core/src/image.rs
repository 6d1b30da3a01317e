//! Single-channel float images, windowed statistics and local contrast
//! normalization.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default stabilizer added to the local standard deviation in LCN.
pub const DEFAULT_LCN_ETA: f64 = 1e-3;
/// Default LCN half-window (a 9x9 patch).
pub const DEFAULT_LCN_RADIUS: usize = 4;

/// Dense row-major grid of real intensities, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite pixel value {v}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { width, height, data }
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self { width, height, data }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image::from_raw(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Mirrors the image left-to-right.
    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.height {
            data.extend(self.row(i).iter().rev());
        }
        Image::from_raw(self.width, self.height, data)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel local mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStats {
    pub mu: Image,
    pub sigma: Image,
    /// Half-window the statistics were computed with.
    pub radius: usize,
}

/// An LCN-normalized image tagged with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub image: Image,
    pub radius: usize,
    pub eta: f64,
}

impl NormalizedImage {
    /// Normalizes `img` and returns it with the statistics used.
    pub fn compute(img: &Image, eta: f64, radius: usize) -> Result<(Self, LocalStats)> {
        let (image, stats) = lcn_normalize(img, eta, radius)?;
        Ok((Self { image, radius, eta }, stats))
    }

    /// Normalized values mapped through a scanline warp; parameters carry over.
    pub fn warp(&self, disparity: &crate::warp::DisparityMap) -> Result<(Self, Vec<bool>)> {
        let (image, mask) = crate::warp::warp_scanline(&self.image, disparity)?;
        Ok((
            Self {
                image,
                radius: self.radius,
                eta: self.eta,
            },
            mask,
        ))
    }
}

/// Mean and population standard deviation over the in-bounds part of the
/// `(2r+1)^2` window around every pixel.
pub fn local_stats(img: &Image, radius: usize) -> Result<LocalStats> {
    if img.is_empty() {
        return Err(Error::EmptyImage);
    }
    if radius == 0 {
        return Err(Error::InvalidParameter("local_stats radius must be >= 1".into()));
    }
    let (w, h) = img.dims();
    let mut mu = vec![0.0; w * h];
    let mut sigma = vec![0.0; w * h];
    mu.par_chunks_mut(w)
        .zip(sigma.par_chunks_mut(w))
        .enumerate()
        .for_each(|(i, (mu_row, sigma_row))| {
            let r0 = i.saturating_sub(radius);
            let r1 = (i + radius).min(h - 1);
            for j in 0..w {
                let c0 = j.saturating_sub(radius);
                let c1 = (j + radius).min(w - 1);
                let n = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
                let mut sum = 0.0;
                for x in r0..=r1 {
                    for &v in &img.row(x)[c0..=c1] {
                        sum += v;
                    }
                }
                let mean = sum / n;
                let mut ss = 0.0;
                for x in r0..=r1 {
                    for &v in &img.row(x)[c0..=c1] {
                        let e = v - mean;
                        ss += e * e;
                    }
                }
                mu_row[j] = mean;
                sigma_row[j] = (ss / n).sqrt();
            }
        });
    Ok(LocalStats {
        mu: Image::from_raw(w, h, mu),
        sigma: Image::from_raw(w, h, sigma),
        radius,
    })
}

/// Local contrast normalization `(I - mu) / (sigma + eta)`.
pub fn lcn_normalize(img: &Image, eta: f64, radius: usize) -> Result<(Image, LocalStats)> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("LCN eta must be > 0, got {eta}")));
    }
    let stats = local_stats(img, radius)?;
    let data = img
        .data()
        .iter()
        .zip(stats.mu.data())
        .zip(stats.sigma.data())
        .map(|((&v, &m), &s)| (v - m) / (s + eta))
        .collect();
    Ok((Image::from_raw(img.width(), img.height(), data), stats))
}
