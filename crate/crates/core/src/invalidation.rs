//! Left-right consistency, confidence maps and average precision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_same_size, Error, Result};
use crate::image::Image;
use crate::warp::{cell, DisparityMap};

/// How the right-reference disparity is read at the non-integer column
/// `j - d_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSampling {
    #[default]
    Bilinear,
    Nearest,
}

/// `d_r` at column `x` of row `i`, `None` when out of bounds or when a
/// contributing sample is invalid.
fn sample_right(d_r: &DisparityMap, i: usize, x: f64, sampling: LrSampling) -> Option<f64> {
    let w = d_r.width();
    match sampling {
        LrSampling::Nearest => {
            if !(x > -0.5 && x < w as f64 - 0.5) {
                return None;
            }
            let c = x.round() as usize;
            d_r.is_valid(i, c).then(|| d_r.get(i, c))
        }
        LrSampling::Bilinear => {
            if w == 1 {
                return (x == 0.0 && d_r.is_valid(i, 0)).then(|| d_r.get(i, 0));
            }
            let (c, a) = cell(x, w)?;
            if a == 0.0 {
                return d_r.is_valid(i, c).then(|| d_r.get(i, c));
            }
            if !(d_r.is_valid(i, c) && d_r.is_valid(i, c + 1)) {
                return None;
            }
            Some((1.0 - a) * d_r.get(i, c) + a * d_r.get(i, c + 1))
        }
    }
}

/// Per-pixel `|d_l(i,j) - d_r(i, j - d_l(i,j))|`; `None` where `d_l` is
/// invalid or the lookup is not defined.
pub fn lr_residual(d_left: &DisparityMap, d_right: &DisparityMap, sampling: LrSampling) -> Result<Vec<Option<f64>>> {
    check_same_size(d_left.dims(), d_right.dims())?;
    let (w, h) = d_left.dims();
    let mut out = vec![None; w * h];
    out.par_chunks_mut(w.max(1)).enumerate().for_each(|(i, row)| {
        for (j, o) in row.iter_mut().enumerate() {
            if !d_left.is_valid(i, j) {
                continue;
            }
            let dl = d_left.get(i, j);
            *o = sample_right(d_right, i, j as f64 - dl, sampling).map(|dr| (dl - dr).abs());
        }
    });
    Ok(out)
}

/// Hard left-right check: valid iff the residual is defined and `< theta`.
pub fn lr_check(d_left: &DisparityMap, d_right: &DisparityMap, theta: f64) -> Result<Vec<bool>> {
    lr_check_with(d_left, d_right, theta, LrSampling::Bilinear)
}

pub fn lr_check_with(d_left: &DisparityMap, d_right: &DisparityMap, theta: f64, sampling: LrSampling) -> Result<Vec<bool>> {
    if !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!("lr_check theta must be > 0, got {theta}")));
    }
    Ok(lr_residual(d_left, d_right, sampling)?
        .into_iter()
        .map(|r| r.is_some_and(|r| r < theta))
        .collect())
}

/// Per-pixel score, higher meaning more likely invalid, with the threshold
/// at which it is binarized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMap {
    width: usize,
    height: usize,
    scores: Vec<f64>,
    threshold: f64,
}

impl ConfidenceMap {
    pub fn new(width: usize, height: usize, scores: Vec<f64>, threshold: f64) -> Result<Self> {
        if scores.len() != width * height {
            return Err(Error::SizeMismatch {
                expected: (width, height),
                got: (scores.len(), 1),
            });
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("confidence scores must be finite, found {s}")));
        }
        Ok(Self {
            width,
            height,
            scores,
            threshold,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    /// `true` where the score reaches the threshold.
    pub fn invalid_mask(&self) -> Vec<bool> {
        self.scores.iter().map(|s| *s >= self.threshold).collect()
    }
}

/// Replaces undefined scores by one more than the largest defined score, so
/// they rank as the least trustworthy pixels.
fn fill_undefined(scores: Vec<Option<f64>>) -> Vec<f64> {
    let top = scores.iter().flatten().fold(0.0f64, |m, s| m.max(*s));
    scores.into_iter().map(|s| s.unwrap_or(top + 1.0)).collect()
}

/// LR consistency residual as a confidence score, binarized at `theta`.
pub fn lr_confidence(d_left: &DisparityMap, d_right: &DisparityMap, theta: f64, sampling: LrSampling) -> Result<ConfidenceMap> {
    let (w, h) = d_left.dims();
    let scores = fill_undefined(lr_residual(d_left, d_right, sampling)?);
    ConfidenceMap::new(w, h, scores, theta)
}

/// `|ref - recon|` as a confidence score.
pub fn photometric_confidence(reference: &Image, recon: &Image) -> Result<ConfidenceMap> {
    photometric_confidence_masked(reference, recon, &vec![true; reference.data().len()])
}

/// Like [`photometric_confidence`], with pixels outside `mask` (no
/// reconstruction available) ranked above every defined score.
pub fn photometric_confidence_masked(reference: &Image, recon: &Image, mask: &[bool]) -> Result<ConfidenceMap> {
    check_same_size(reference.dims(), recon.dims())?;
    if mask.len() != reference.data().len() {
        return Err(Error::InvalidParameter(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            reference.data().len()
        )));
    }
    let scores = reference
        .data()
        .iter()
        .zip(recon.data())
        .zip(mask)
        .map(|((a, b), m)| m.then(|| (a - b).abs()))
        .collect();
    let (w, h) = reference.dims();
    ConfidenceMap::new(w, h, fill_undefined(scores), 0.1)
}

/// Average precision of `scores` as a detector of `gt_invalid` pixels.
///
/// Pixels are ranked by decreasing score; tied scores enter together, and
/// AP is the sum over thresholds of `(R_k - R_{k-1}) * P_k`.
pub fn mask_ap(scores: &ConfidenceMap, gt_invalid: &[bool]) -> Result<f64> {
    if gt_invalid.len() != scores.scores.len() {
        return Err(Error::SizeMismatch {
            expected: scores.dims(),
            got: (gt_invalid.len(), 1),
        });
    }
    let positives = gt_invalid.iter().filter(|g| **g).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..gt_invalid.len()).collect();
    order.sort_by(|a, b| scores.scores[*b].total_cmp(&scores.scores[*a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores.scores[order[k]];
        while k < order.len() && scores.scores[order[k]] == s {
            tp += gt_invalid[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}
