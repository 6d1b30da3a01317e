//! Disparity cost volumes and their readouts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_same_size, Error, Result};
use crate::image::{lcn_normalize, Image, DEFAULT_LCN_ETA, DEFAULT_LCN_RADIUS};
use crate::loss::{window, AswParams, SupportWeights};
use crate::warp::DisparityMap;

/// Per-pixel matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostKind {
    Photometric,
    Wlcn { eta: f64, radius: usize },
}

impl CostKind {
    pub fn wlcn() -> Self {
        CostKind::Wlcn {
            eta: DEFAULT_LCN_ETA,
            radius: DEFAULT_LCN_RADIUS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuideKind {
    /// Raw reference intensity.
    #[default]
    Raw,
    /// LCN-normalized reference, rescaled to `[0, 1]`.
    Lcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aggregation {
    None,
    Asw {
        #[serde(flatten)]
        params: AswParams,
        #[serde(default)]
        guide: GuideKind,
    },
}

impl Aggregation {
    pub fn asw(half_window: usize) -> Self {
        Aggregation::Asw {
            params: AswParams {
                half_window,
                ..AswParams::default()
            },
            guide: GuideKind::Raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    pub cost: CostKind,
    pub aggregation: Aggregation,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            cost: CostKind::wlcn(),
            aggregation: Aggregation::asw(16),
        }
    }
}

/// Matching costs over integer disparity hypotheses `d_min..=d_max`.
///
/// Stored pixel-major: the curve of one pixel is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    d_min: usize,
    d_max: usize,
    cost: Vec<f64>,
    valid: Vec<bool>,
}

impl CostVolume {
    /// Builds a volume from per-plane costs, `planes[d - d_min][row * width + col]`.
    pub fn from_planes(
        width: usize,
        height: usize,
        d_min: usize,
        planes: &[Vec<f64>],
        valid: &[Vec<bool>],
    ) -> Result<Self> {
        if planes.len() < 2 || valid.len() != planes.len() {
            return Err(Error::InvalidParameter("a volume needs at least two planes".into()));
        }
        let n = width * height;
        let depth = planes.len();
        let mut cost = vec![0.0; n * depth];
        let mut mask = vec![false; n * depth];
        for (di, (p, v)) in planes.iter().zip(valid).enumerate() {
            if p.len() != n || v.len() != n {
                return Err(Error::InvalidParameter("plane size mismatch".into()));
            }
            for px in 0..n {
                if v[px] && !(p[px].is_finite() && p[px] >= 0.0) {
                    return Err(Error::InvalidParameter(format!("invalid cost {}", p[px])));
                }
                cost[px * depth + di] = p[px];
                mask[px * depth + di] = v[px];
            }
        }
        Ok(Self {
            width,
            height,
            d_min,
            d_max: d_min + depth - 1,
            cost,
            valid: mask,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_min(&self) -> usize {
        self.d_min
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    /// Number of disparity planes.
    pub fn depth(&self) -> usize {
        self.d_max - self.d_min + 1
    }

    #[inline]
    pub fn cost(&self, plane: usize, row: usize, col: usize) -> f64 {
        self.cost[(row * self.width + col) * self.depth() + plane]
    }

    #[inline]
    pub fn is_valid(&self, plane: usize, row: usize, col: usize) -> bool {
        self.valid[(row * self.width + col) * self.depth() + plane]
    }

    /// Costs of one pixel over all planes.
    pub fn curve(&self, row: usize, col: usize) -> (&[f64], &[bool]) {
        let d = self.depth();
        let s = (row * self.width + col) * d;
        (&self.cost[s..s + d], &self.valid[s..s + d])
    }

    /// One plane as a row-major image buffer plus validity.
    pub fn plane(&self, plane: usize) -> (Vec<f64>, Vec<bool>) {
        let d = self.depth();
        let n = self.width * self.height;
        ((0..n).map(|p| self.cost[p * d + plane]).collect(), (0..n).map(|p| self.valid[p * d + plane]).collect())
    }

    /// Adds `offset[pixel]` to every plane of that pixel.
    pub fn shifted(&self, offset: impl Fn(usize, usize) -> f64) -> CostVolume {
        let d = self.depth();
        let mut out = self.clone();
        for i in 0..self.height {
            for j in 0..self.width {
                let o = offset(i, j);
                let s = (i * self.width + j) * d;
                out.cost[s..s + d].iter_mut().for_each(|c| *c += o);
            }
        }
        out
    }
}

const LANES: usize = 8;
const BLOCK: usize = 4;

/// Raw (unaggregated) costs with the disparity axis padded to a multiple of
/// `LANES`. Cells with `j < d` are out of frame and hold 0.
fn raw_costs(left: &Image, right: &Image, d_min: usize, depth: usize, cost: CostKind) -> Result<(Vec<f64>, usize)> {
    let (w, h) = left.dims();
    let stride = depth.div_ceil(LANES) * LANES;
    let (reference, source, weight) = match cost {
        CostKind::Photometric => (left.clone(), right.clone(), None),
        CostKind::Wlcn { eta, radius } => {
            let (ll, stats) = lcn_normalize(left, eta, radius)?;
            let (lr, _) = lcn_normalize(right, eta, radius)?;
            (ll, lr, Some(stats.sigma))
        }
    };
    let mut out = vec![0.0; w * h * stride];
    out.par_chunks_mut(w * stride).enumerate().for_each(|(i, row)| {
        let r = reference.row(i);
        let s = source.row(i);
        for j in 0..w {
            let sig = weight.as_ref().map_or(1.0, |sg| sg.get(i, j));
            let cell = &mut row[j * stride..j * stride + depth];
            for (di, c) in cell.iter_mut().enumerate() {
                let d = d_min + di;
                if j >= d {
                    *c = sig * (r[j] - s[j - d]).abs();
                }
            }
        }
    });
    Ok((out, stride))
}

pub(crate) fn guide_image(left: &Image, cost: CostKind, guide: GuideKind) -> Result<Image> {
    match guide {
        GuideKind::Raw => Ok(left.clone()),
        GuideKind::Lcn => {
            let (eta, radius) = match cost {
                CostKind::Wlcn { eta, radius } => (eta, radius),
                CostKind::Photometric => (DEFAULT_LCN_ETA, DEFAULT_LCN_RADIUS),
            };
            let (lcn, _) = lcn_normalize(left, eta, radius)?;
            let (lo, hi) = lcn.min_max();
            let span = if hi > lo { hi - lo } else { 1.0 };
            Ok(lcn.map(|v| (v - lo) / span))
        }
    }
}

/// Builds the cost volume of the left view against the right view over
/// disparities `d_min..=d_max`.
///
/// Plane `d` holds the cost of warping the right image by constant `d`,
/// optionally ASW-aggregated. A cell is valid iff `j >= d`; aggregation keeps
/// that validity and draws only on valid neighbours.
pub fn build_volume(left: &Image, right: &Image, d_min: usize, d_max: usize, cfg: &VolumeConfig) -> Result<CostVolume> {
    check_same_size(left.dims(), right.dims())?;
    if left.is_empty() {
        return Err(Error::EmptyImage);
    }
    if d_max <= d_min {
        return Err(Error::InvalidParameter(format!("need d_max > d_min, got [{d_min}, {d_max}]")));
    }
    let (w, h) = left.dims();
    let depth = d_max - d_min + 1;
    let (raw, stride) = raw_costs(left, right, d_min, depth, cfg.cost)?;
    let mut valid = vec![false; w * h * depth];
    valid.par_chunks_mut(depth).enumerate().for_each(|(p, v)| {
        let j = p % w;
        for (di, flag) in v.iter_mut().enumerate() {
            *flag = j >= d_min + di;
        }
    });
    let cost = match cfg.aggregation {
        Aggregation::None => {
            let mut cost = vec![0.0; w * h * depth];
            cost.par_chunks_mut(depth)
                .zip(raw.par_chunks(stride))
                .for_each(|(c, r)| c.copy_from_slice(&r[..depth]));
            cost
        }
        Aggregation::Asw { params, guide } => {
            params.validate()?;
            let g = guide_image(left, cfg.cost, guide)?;
            aggregate_volume(&raw, stride, depth, d_min, &g, &params)
        }
    };
    Ok(CostVolume {
        width: w,
        height: h,
        d_min,
        d_max,
        cost,
        valid,
    })
}

/// Exact ASW over every plane at once. For each output pixel the window
/// weights are computed once and the planes are accumulated `LANES` at a time.
fn aggregate_volume(raw: &[f64], stride: usize, depth: usize, d_min: usize, guide: &Image, params: &AswParams) -> Vec<f64> {
    let (w, h) = guide.dims();
    let weights = SupportWeights::new(guide, params.sigma_w_unit());
    let job = AggregateJob {
        raw,
        stride,
        depth,
        d_min,
        width: w,
        height: h,
        k: params.half_window,
        weights: &weights,
    };
    let mut out = vec![0.0; w * h * depth];
    out.par_chunks_mut(w * depth).enumerate().for_each(|(i, out_row)| job.row(i, out_row));
    out
}

struct AggregateJob<'a> {
    raw: &'a [f64],
    stride: usize,
    depth: usize,
    d_min: usize,
    width: usize,
    height: usize,
    k: usize,
    weights: &'a SupportWeights<'a>,
}

impl AggregateJob<'_> {
    fn row(&self, i: usize, out_row: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx") && std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: the CPU supports AVX and FMA, checked above.
                unsafe { self.row_avx_fma(i, out_row) };
                return;
            }
        }
        self.row_generic::<false>(i, out_row);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx,fma")]
    unsafe fn row_avx_fma(&self, i: usize, out_row: &mut [f64]) {
        self.row_generic::<true>(i, out_row);
    }

    /// One output row, `BLOCK` neighbouring pixels at a time: every cost cell
    /// loaded from the window is used for all pixels of the block, with zero
    /// weight where it lies outside a pixel's own window.
    #[inline(always)]
    fn row_generic<const FMA: bool>(&self, i: usize, out_row: &mut [f64]) {
        let (w, h, k, stride, depth, d_min) = (self.width, self.height, self.k, self.stride, self.depth, self.d_min);
        let raw = self.raw;
        let (x0, x1) = window(i, k, h);
        let rows = x1 - x0 + 1;
        let ucap = 2 * k + BLOCK - 1;
        let mut wbuf = vec![0.0; rows * ucap * BLOCK];
        let mut colsum = vec![0.0; (ucap + 1) * BLOCK];
        let mut acc_all = vec![0.0; BLOCK * stride];
        for jb in (0..w).step_by(BLOCK) {
            let nb = BLOCK.min(w - jb);
            let u0 = jb.saturating_sub(k);
            let u1 = (jb + nb - 1 + k - 1).min(w - 1);
            let ucols = u1 - u0 + 1;
            let wb = &mut wbuf[..rows * ucols * BLOCK];
            wb.fill(0.0);
            for p in 0..nb {
                let j = jb + p;
                let (y0, y1) = window(j, k, w);
                let center = i * w + j;
                for (r, x) in (x0..=x1).enumerate() {
                    for y in y0..=y1 {
                        wb[(r * ucols + y - u0) * BLOCK + p] = self.weights.weight(center, x * w + y);
                    }
                }
            }
            // suffix sums of column weights give the normalizer of each plane:
            // plane d draws on columns y >= d only
            colsum[ucols * BLOCK..(ucols + 1) * BLOCK].fill(0.0);
            for c in (0..ucols).rev() {
                for p in 0..BLOCK {
                    let mut s = 0.0;
                    for r in 0..rows {
                        s += wb[(r * ucols + c) * BLOCK + p];
                    }
                    colsum[c * BLOCK + p] = colsum[(c + 1) * BLOCK + p] + s;
                }
            }
            for chunk in 0..stride / LANES {
                let d_lo = d_min + chunk * LANES;
                if d_lo > jb + nb - 1 {
                    // every plane of this chunk is out of frame for the block
                    for p in 0..BLOCK {
                        acc_all[p * stride + chunk * LANES..p * stride + (chunk + 1) * LANES].fill(0.0);
                    }
                    continue;
                }
                let y_start = u0.max(d_lo);
                let mut acc = [[0.0f64; LANES]; BLOCK];
                for (r, x) in (x0..=x1).enumerate() {
                    let wrow = &wb[(r * ucols + y_start - u0) * BLOCK..(r * ucols + ucols) * BLOCK];
                    let cells = &raw[(x * w + y_start) * stride + chunk * LANES..(x * w + u1) * stride + (chunk + 1) * LANES];
                    for (wts, cell) in wrow.chunks_exact(BLOCK).zip(cells.chunks(stride)) {
                        let cell: &[f64; LANES] = cell[..LANES].try_into().unwrap();
                        for p in 0..BLOCK {
                            let wt = wts[p];
                            for t in 0..LANES {
                                acc[p][t] = if FMA { wt.mul_add(cell[t], acc[p][t]) } else { acc[p][t] + wt * cell[t] };
                            }
                        }
                    }
                }
                for p in 0..BLOCK {
                    acc_all[p * stride + chunk * LANES..p * stride + (chunk + 1) * LANES].copy_from_slice(&acc[p]);
                }
            }
            for p in 0..nb {
                let j = jb + p;
                let y0 = window(j, k, w).0;
                let dst = &mut out_row[j * depth..(j + 1) * depth];
                for (di, o) in dst.iter_mut().enumerate() {
                    let d = d_min + di;
                    if d > j {
                        continue;
                    }
                    *o = acc_all[p * stride + di] / colsum[(d.max(y0) - u0) * BLOCK + p];
                }
            }
        }
    }
}

/// Softmax over `-cost / temperature` on the valid planes of one pixel.
fn softmax_weights(costs: &[f64], valid: &[bool], temperature: f64, out: &mut [f64]) -> bool {
    let c_min = costs
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(c, _)| *c)
        .fold(f64::INFINITY, f64::min);
    if !c_min.is_finite() {
        return false;
    }
    let mut z = 0.0;
    for ((o, c), v) in out.iter_mut().zip(costs).zip(valid) {
        *o = if *v { (-(c - c_min) / temperature).exp() } else { 0.0 };
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
    true
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(())
}

/// Expected disparity under `softmax(-C / temperature)`; invalid planes are
/// excluded, pixels without any valid plane are invalid.
pub fn soft_argmin(vol: &CostVolume, temperature: f64) -> Result<DisparityMap> {
    check_temperature(temperature)?;
    let depth = vol.depth();
    let n = vol.width * vol.height;
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    values
        .par_iter_mut()
        .zip(valid.par_iter_mut())
        .enumerate()
        .for_each_init(
            || vec![0.0; depth],
            |p, (k, (val, ok))| {
                let c = &vol.cost[k * depth..(k + 1) * depth];
                let v = &vol.valid[k * depth..(k + 1) * depth];
                if softmax_weights(c, v, temperature, p) {
                    *val = p.iter().enumerate().map(|(di, pd)| pd * (vol.d_min + di) as f64).sum();
                    *ok = true;
                }
            },
        );
    Ok(DisparityMap::from_raw(vol.width, vol.height, values, valid))
}

/// Jacobian of [`soft_argmin`] with respect to every cost cell,
/// `-(1/T) p_d (d - d*)`, in the volume's layout. Invalid cells are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftArgminJacobian {
    width: usize,
    depth: usize,
    values: Vec<f64>,
}

impl SoftArgminJacobian {
    pub fn get(&self, plane: usize, row: usize, col: usize) -> f64 {
        self.values[(row * self.width + col) * self.depth + plane]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let s = (row * self.width + col) * self.depth;
        &self.values[s..s + self.depth]
    }
}

pub fn soft_argmin_grad(vol: &CostVolume, temperature: f64) -> Result<SoftArgminJacobian> {
    check_temperature(temperature)?;
    let depth = vol.depth();
    let mut values = vec![0.0; vol.cost.len()];
    values.par_chunks_mut(depth).enumerate().for_each(|(k, g)| {
        let c = &vol.cost[k * depth..(k + 1) * depth];
        let v = &vol.valid[k * depth..(k + 1) * depth];
        let mut p = vec![0.0; depth];
        if !softmax_weights(c, v, temperature, &mut p) {
            return;
        }
        let mean: f64 = p.iter().enumerate().map(|(di, pd)| pd * (vol.d_min + di) as f64).sum();
        for (di, gd) in g.iter_mut().enumerate() {
            *gd = -p[di] * ((vol.d_min + di) as f64 - mean) / temperature;
        }
    });
    Ok(SoftArgminJacobian {
        width: vol.width,
        depth,
        values,
    })
}

/// Parabola vertex offset through three equally spaced samples, clamped to
/// half a pixel; 0 when the curvature is not positive.
pub fn parabola_offset(c_minus: f64, c0: f64, c_plus: f64) -> f64 {
    let den = 2.0 * (c_minus - 2.0 * c0 + c_plus);
    if !(den > f64::EPSILON * (c_minus.abs() + c0.abs() + c_plus.abs()).max(f64::MIN_POSITIVE)) {
        return 0.0;
    }
    ((c_minus - c_plus) / den).clamp(-0.5, 0.5)
}

/// Index of the smallest valid cost, lowest disparity on ties.
pub(crate) fn argmin_valid(costs: &[f64], valid: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (di, (c, v)) in costs.iter().zip(valid).enumerate() {
        if *v && best.map_or(true, |b| *c < costs[b]) {
            best = Some(di);
        }
    }
    best
}

/// Winner-take-all with parabolic subpixel refinement.
pub fn wta_subpixel(vol: &CostVolume) -> DisparityMap {
    let depth = vol.depth();
    let n = vol.width * vol.height;
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    values
        .par_iter_mut()
        .zip(valid.par_iter_mut())
        .enumerate()
        .for_each(|(k, (val, ok))| {
            let c = &vol.cost[k * depth..(k + 1) * depth];
            let v = &vol.valid[k * depth..(k + 1) * depth];
            let Some(best) = argmin_valid(c, v) else { return };
            let mut offset = 0.0;
            if best > 0 && best + 1 < depth && v[best - 1] && v[best + 1] {
                offset = parabola_offset(c[best - 1], c[best], c[best + 1]);
            }
            *val = (vol.d_min + best) as f64 + offset;
            *ok = true;
        });
    DisparityMap::from_raw(vol.width, vol.height, values, valid)
}

/// Cost-versus-disparity curve at one pixel; `None` marks invalid planes.
pub fn landscape(vol: &CostVolume, row: usize, col: usize) -> Result<Vec<(usize, Option<f64>)>> {
    if row >= vol.height || col >= vol.width {
        return Err(Error::InvalidParameter(format!(
            "pixel ({row}, {col}) outside {}x{} volume",
            vol.width, vol.height
        )));
    }
    let (c, v) = vol.curve(row, col);
    Ok(c.iter()
        .zip(v)
        .enumerate()
        .map(|(di, (c, v))| (vol.d_min + di, v.then_some(*c)))
        .collect())
}
