//! Per-pixel reconstruction costs and adaptive-support-weight aggregation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_same_size, Error, Result};
use crate::image::{Image, LocalStats, NormalizedImage};

/// Nonnegative per-pixel matching cost with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    width: usize,
    height: usize,
    cost: Vec<f64>,
    valid: Vec<bool>,
}

impl CostMap {
    pub fn new(width: usize, height: usize, cost: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if cost.len() != width * height || valid.len() != width * height {
            return Err(Error::InvalidParameter("cost map buffer size mismatch".into()));
        }
        for (c, ok) in cost.iter().zip(&valid) {
            if *ok && !(c.is_finite() && *c >= 0.0) {
                return Err(Error::InvalidParameter(format!("valid cost {c} must be finite and >= 0")));
            }
        }
        Ok(Self { width, height, cost, valid })
    }

    pub(crate) fn from_raw(width: usize, height: usize, cost: Vec<f64>, valid: Vec<bool>) -> Self {
        Self { width, height, cost, valid }
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

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cost[row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    /// Sum of the cost over valid pixels.
    pub fn total(&self) -> f64 {
        self.cost.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(c, _)| c).sum()
    }

    /// Mean cost over valid pixels, `None` if nothing is valid.
    pub fn mean(&self) -> Option<f64> {
        let n = self.valid.iter().filter(|v| **v).count();
        (n > 0).then(|| self.total() / n as f64)
    }
}

fn check_mask(mask: &[bool], dims: (usize, usize)) -> Result<()> {
    if mask.len() != dims.0 * dims.1 {
        return Err(Error::InvalidParameter(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            dims.0 * dims.1
        )));
    }
    Ok(())
}

/// `|ref - recon|` on pixels where `mask` holds.
pub fn photometric_cost(reference: &Image, recon: &Image, mask: &[bool]) -> Result<CostMap> {
    check_same_size(reference.dims(), recon.dims())?;
    check_mask(mask, reference.dims())?;
    let cost = reference
        .data()
        .iter()
        .zip(recon.data())
        .zip(mask)
        .map(|((a, b), m)| if *m { (a - b).abs() } else { 0.0 })
        .collect();
    Ok(CostMap::from_raw(reference.width(), reference.height(), cost, mask.to_vec()))
}

/// `sigma_ref * |LCN(ref) - recon_lcn|`, where `recon_lcn` is the warped,
/// already normalized other view.
pub fn wlcn_cost(
    reference: &Image,
    recon_lcn: &NormalizedImage,
    ref_stats: &LocalStats,
    mask: &[bool],
) -> Result<CostMap> {
    check_same_size(reference.dims(), recon_lcn.image.dims())?;
    check_same_size(reference.dims(), ref_stats.mu.dims())?;
    check_mask(mask, reference.dims())?;
    if ref_stats.radius != recon_lcn.radius {
        return Err(Error::InvalidParameter(format!(
            "LCN radius mismatch: reference stats use {}, reconstruction uses {}",
            ref_stats.radius, recon_lcn.radius
        )));
    }
    let eta = recon_lcn.eta;
    let cost = (0..reference.data().len())
        .map(|k| {
            if !mask[k] {
                return 0.0;
            }
            let sigma = ref_stats.sigma.data()[k];
            let lcn = (reference.data()[k] - ref_stats.mu.data()[k]) / (sigma + eta);
            sigma * (lcn - recon_lcn.image.data()[k]).abs()
        })
        .collect();
    Ok(CostMap::from_raw(reference.width(), reference.height(), cost, mask.to_vec()))
}

/// Adaptive support weight window parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AswParams {
    /// `k`: the window spans `[i-k, i+k-1] x [j-k, j+k-1]` (2k x 2k).
    pub half_window: usize,
    /// Weight falloff `sigma_w`, in 8-bit intensity units.
    pub sigma_w_8bit: f64,
}

impl Default for AswParams {
    fn default() -> Self {
        Self {
            half_window: 16,
            sigma_w_8bit: 2.0,
        }
    }
}

impl AswParams {
    pub fn validate(&self) -> Result<()> {
        if self.half_window == 0 {
            return Err(Error::InvalidParameter("ASW half window must be >= 1".into()));
        }
        if !(self.sigma_w_8bit > 0.0) {
            return Err(Error::InvalidParameter("ASW sigma_w must be > 0".into()));
        }
        Ok(())
    }

    /// `sigma_w` on `[0, 1]` intensities.
    pub fn sigma_w_unit(&self) -> f64 {
        self.sigma_w_8bit / 255.0
    }
}

/// Support weights `exp(-|I_a - I_b| / sigma)` evaluated as a product of
/// per-pixel exponentials, so a window costs no `exp` calls.
pub(crate) struct SupportWeights<'a> {
    guide: &'a Image,
    sigma: f64,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl<'a> SupportWeights<'a> {
    const MAX_EXPONENT: f64 = 300.0;

    pub(crate) fn new(guide: &'a Image, sigma: f64) -> Self {
        let (lo, hi) = guide.min_max();
        let center = 0.5 * (lo + hi);
        if (hi - lo) * 0.5 / sigma > Self::MAX_EXPONENT {
            return Self { guide, sigma, pos: Vec::new(), neg: Vec::new() };
        }
        let pos = guide.data().iter().map(|v| ((v - center) / sigma).exp()).collect::<Vec<_>>();
        let neg = pos.iter().map(|p| 1.0 / p).collect();
        Self { guide, sigma, pos, neg }
    }

    /// Weight between flat pixel indices `a` (window center) and `b`.
    #[inline]
    pub(crate) fn weight(&self, a: usize, b: usize) -> f64 {
        if self.pos.is_empty() {
            let d = self.guide.data()[a] - self.guide.data()[b];
            return (-d.abs() / self.sigma).exp();
        }
        (self.pos[a] * self.neg[b]).min(self.pos[b] * self.neg[a])
    }
}

/// Window bounds `[i-k, i+k-1]` clipped to `[0, n-1]`.
#[inline]
pub(crate) fn window(i: usize, k: usize, n: usize) -> (usize, usize) {
    (i.saturating_sub(k), (i + k - 1).min(n - 1))
}

/// Edge-preserving window aggregation: every output pixel is the
/// support-weighted mean of the valid costs in its 2k x 2k window, with
/// weights from guide intensity similarity to the center pixel.
pub fn asw_aggregate(costs: &CostMap, guide: &Image, params: &AswParams) -> Result<CostMap> {
    params.validate()?;
    check_same_size(costs.dims(), guide.dims())?;
    let (w, h) = costs.dims();
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    let k = params.half_window;
    let weights = SupportWeights::new(guide, params.sigma_w_unit());
    let mut out = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    out.par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(i, (orow, vrow))| {
            let (x0, x1) = window(i, k, h);
            for j in 0..w {
                let (y0, y1) = window(j, k, w);
                let center = i * w + j;
                let mut num = 0.0;
                let mut den = 0.0;
                for x in x0..=x1 {
                    for y in y0..=y1 {
                        let idx = x * w + y;
                        if costs.valid[idx] {
                            let wt = weights.weight(center, idx);
                            num += wt * costs.cost[idx];
                            den += wt;
                        }
                    }
                }
                if den > 0.0 {
                    orow[j] = num / den;
                    vrow[j] = true;
                }
            }
        });
    Ok(CostMap::from_raw(w, h, out, valid))
}

/// Per-pixel coefficient `beta_xy` such that the sum of the aggregated cost
/// over all output pixels equals `sum_xy beta_xy * C_xy` for any costs with
/// the given validity mask.
pub(crate) fn asw_pixel_coefficients(valid: &[bool], guide: &Image, params: &AswParams) -> Vec<f64> {
    let (w, h) = guide.dims();
    let k = params.half_window;
    let weights = SupportWeights::new(guide, params.sigma_w_unit());
    // inverse normalizer of every window
    let mut inv_den = vec![0.0; w * h];
    inv_den.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        let (x0, x1) = window(i, k, h);
        for (j, out) in row.iter_mut().enumerate() {
            let (y0, y1) = window(j, k, w);
            let center = i * w + j;
            let mut den = 0.0;
            for x in x0..=x1 {
                for y in y0..=y1 {
                    if valid[x * w + y] {
                        den += weights.weight(center, x * w + y);
                    }
                }
            }
            *out = if den > 0.0 { 1.0 / den } else { 0.0 };
        }
    });
    // pixel (x, y) lies in the windows of centers i in [x-k+1, x+k]
    let mut beta = vec![0.0; w * h];
    beta.par_chunks_mut(w).enumerate().for_each(|(x, row)| {
        let i0 = (x + 1).saturating_sub(k);
        let i1 = (x + k).min(h - 1);
        for (y, out) in row.iter_mut().enumerate() {
            let idx = x * w + y;
            if !valid[idx] {
                continue;
            }
            let j0 = (y + 1).saturating_sub(k);
            let j1 = (y + k).min(w - 1);
            let mut acc = 0.0;
            for i in i0..=i1 {
                for j in j0..=j1 {
                    let c = i * w + j;
                    acc += weights.weight(c, idx) * inv_den[c];
                }
            }
            *out = acc;
        }
    });
    beta
}
