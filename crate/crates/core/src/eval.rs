//! Depth evaluation: plane fitting, bias/jitter, subpixel precision, error
//! curves and reports.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_same_size, Error, Result};
use crate::geometry::{expected_depth_error, CameraRig};
use crate::image::Image;
use crate::warp::DisparityMap;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Per-pixel depth in meters; pixels without a positive disparity are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let p = row * self.width + col;
        self.valid[p].then_some(self.depth[p])
    }

    /// Back-projected 3D points of the valid pixels, row-major order.
    pub fn points(&self, rig: &CameraRig) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for i in 0..self.height {
            for j in 0..self.width {
                if let Some(z) = self.get(i, j) {
                    let r = rig.pixel_ray(i as f64, j as f64, self.width, self.height);
                    out.push([r[0] * z, r[1] * z, z]);
                }
            }
        }
        out
    }
}

pub fn depth_map(d: &DisparityMap, rig: &CameraRig) -> Result<DepthMap> {
    rig.validate()?;
    let bf = rig.bf();
    let (w, h) = d.dims();
    let (depth, valid) = d
        .values()
        .iter()
        .zip(d.valid())
        .map(|(v, ok)| if *ok && *v > 0.0 { (bf / v, true) } else { (0.0, false) })
        .unzip();
    Ok(DepthMap {
        width: w,
        height: h,
        depth,
        valid,
    })
}

/// The plane `normal . X = offset`, with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    /// Normalizes `normal` and orients it so that `normal.z >= 0`.
    pub fn new(normal: [f64; 3], offset: f64) -> Result<Self> {
        let n = Vector3::from(normal);
        let len = n.norm();
        if !(len > 0.0 && len.is_finite()) || !offset.is_finite() {
            return Err(Error::Degenerate("plane normal must be finite and nonzero".into()));
        }
        let s = if n.z < 0.0 { -1.0 } else { 1.0 } / len;
        Ok(Self {
            normal: (n * s).into(),
            offset: offset * s,
        })
    }

    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        dot(self.normal, p) - self.offset
    }

    /// Depth (Z) at which the ray `t * ray` meets the plane.
    pub fn depth_along_ray(&self, ray: [f64; 3]) -> Option<f64> {
        let den = dot(self.normal, ray);
        if den.abs() < 1e-15 {
            return None;
        }
        let t = self.offset / den;
        (t > 0.0).then(|| t * ray[2])
    }
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Plane through three points, `None` if they are (nearly) collinear.
fn plane_through(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<Plane> {
    let u = sub(b, a);
    let v = sub(c, a);
    let n = cross(u, v);
    let scale = dot(u, u).sqrt() * dot(v, v).sqrt();
    if !(dot(n, n).sqrt() > 1e-12 * scale) {
        return None;
    }
    Plane::new(n, dot(n, a)).ok()
}

/// Total least squares plane: through the centroid, normal along the
/// smallest-eigenvalue eigenvector of the scatter matrix.
pub fn fit_plane_tls(points: &[[f64; 3]]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("need >= 3 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    let mut m = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - c;
        m += d * d.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let (l0, l1) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    // a line (or a point) has two vanishing eigenvalues
    if !(l1 > 1e-12 * eig.eigenvalues[order[2]].max(f64::MIN_POSITIVE)) || !l0.is_finite() {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let normal: [f64; 3] = eig.eigenvectors.column(order[0]).into_owned().into();
    Plane::new(normal, dot(normal, c.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iterations: usize,
    /// Inlier distance to the plane in meters.
    pub inlier_tol: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    pub inliers: Vec<bool>,
}

impl PlaneFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|v| **v).count()
    }
}

/// RANSAC over seeded 3-point samples followed by a total least squares
/// refit on the inliers of the best hypothesis.
///
/// Candidate planes are drawn sequentially from the seed and scored in
/// parallel; ties go to the earliest candidate, so the result does not
/// depend on the thread count.
pub fn fit_plane_robust(points: &[[f64; 3]], params: &RansacParams) -> Result<PlaneFit> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("need >= 3 points, got {}", points.len())));
    }
    if !(params.inlier_tol > 0.0) || params.iterations == 0 {
        return Err(Error::InvalidParameter("RANSAC needs iterations >= 1 and inlier_tol > 0".into()));
    }
    // the whole set must span a plane
    fit_plane_tls(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = points.len();
    let candidates: Vec<Plane> = (0..params.iterations)
        .filter_map(|_| {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            let c = rng.gen_range(0..n);
            if a == b || b == c || a == c {
                return None;
            }
            plane_through(points[a], points[b], points[c])
        })
        .collect();
    let count = |pl: &Plane| {
        points
            .iter()
            .filter(|p| pl.signed_distance(**p).abs() <= params.inlier_tol)
            .count()
    };
    let scores: Vec<usize> = candidates.par_iter().map(count).collect();
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(k, _)| k);
    let seed_plane = match best {
        Some(k) if scores[k] >= 3 => candidates[k],
        _ => fit_plane_tls(points)?,
    };
    let mut plane = seed_plane;
    let mut inliers: Vec<bool> = points
        .iter()
        .map(|p| plane.signed_distance(*p).abs() <= params.inlier_tol)
        .collect();
    // refit, then settle the inlier set against the refined plane once more
    for _ in 0..2 {
        let sel: Vec<[f64; 3]> = points.iter().zip(&inliers).filter(|(_, v)| **v).map(|(p, _)| *p).collect();
        plane = fit_plane_tls(&sel)?;
        let next: Vec<bool> = points
            .iter()
            .map(|p| plane.signed_distance(*p).abs() <= params.inlier_tol)
            .collect();
        if next.iter().filter(|v| **v).count() < 3 {
            break;
        }
        inliers = next;
    }
    Ok(PlaneFit { plane, inliers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasJitter {
    /// Mean absolute depth error, meters.
    pub bias: f64,
    /// Standard deviation of the signed depth error, meters.
    pub jitter: f64,
    pub n_pixels: usize,
}

pub const MIN_EVAL_PIXELS: usize = 100;

/// Depth error of every valid pixel against the plane, measured along the
/// pixel's viewing ray.
pub fn bias_jitter(depth: &DepthMap, plane: &Plane, rig: &CameraRig) -> Result<BiasJitter> {
    let (w, h) = depth.dims();
    let mut errs = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let Some(z) = depth.get(i, j) else { continue };
            let ray = rig.pixel_ray(i as f64, j as f64, w, h);
            if let Some(zp) = plane.depth_along_ray(ray) {
                errs.push(z - zp);
            }
        }
    }
    if errs.len() < MIN_EVAL_PIXELS {
        return Err(Error::Degenerate(format!(
            "bias/jitter needs >= {MIN_EVAL_PIXELS} valid pixels, got {}",
            errs.len()
        )));
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let bias = errs.iter().map(|e| e.abs()).sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(BiasJitter {
        bias,
        jitter: var.sqrt(),
        n_pixels: errs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallEval {
    pub plane: Plane,
    pub stats: BiasJitter,
    /// Valid pixels before the inlier gate.
    pub n_valid: usize,
}

/// Plane fit of a wall followed by bias/jitter against that plane.
///
/// The RANSAC inlier tolerance is the depth error of a 1 px disparity error
/// at the median depth. Bias and jitter are taken over the inliers of the
/// final fit, so gross mismatches (which a sensor would report as holes) do
/// not swamp the subpixel error being measured.
pub fn evaluate_wall(d: &DisparityMap, rig: &CameraRig, iterations: usize, seed: u64) -> Result<WallEval> {
    let depth = depth_map(d, rig)?;
    let points = depth.points(rig);
    if points.len() < MIN_EVAL_PIXELS {
        return Err(Error::Degenerate(format!("wall has only {} valid pixels", points.len())));
    }
    let mut zs: Vec<f64> = points.iter().map(|p| p[2]).collect();
    zs.sort_by(f64::total_cmp);
    let tol = expected_depth_error(zs[zs.len() / 2], 1.0, rig)?;
    let fit = fit_plane_robust(
        &points,
        &RansacParams {
            iterations,
            inlier_tol: tol,
            seed,
        },
    )?;
    // points() walks the valid pixels in row-major order
    let mut gated = depth.clone();
    let mut k = 0;
    for v in gated.valid.iter_mut() {
        if *v {
            *v = fit.inliers[k];
            k += 1;
        }
    }
    let stats = bias_jitter(&gated, &fit.plane, rig)?;
    Ok(WallEval {
        plane: fit.plane,
        stats,
        n_valid: points.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubpixelFit {
    pub delta: f64,
    pub r_squared: f64,
}

/// Least squares `delta` of `bias ~ delta * Z^2 / (b f)` over
/// `(Z, bias)` samples, with the coefficient of determination.
pub fn fit_subpixel_delta(samples: &[(f64, f64)], rig: &CameraRig) -> Result<SubpixelFit> {
    rig.validate()?;
    let mut zs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    if zs.len() < 3 {
        return Err(Error::Degenerate(format!("need >= 3 distinct depths, got {}", zs.len())));
    }
    if let Some(s) = samples.iter().find(|s| !(s.0 > 0.0) || !s.1.is_finite()) {
        return Err(Error::InvalidParameter(format!("bad sample (Z={}, bias={})", s.0, s.1)));
    }
    let bf = rig.bf();
    let x: Vec<f64> = samples.iter().map(|s| s.0 * s.0 / bf).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let delta = sxy / sxx;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = x.iter().zip(&y).map(|(a, b)| (b - delta * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - mean).powi(2)).sum();
    let r_squared = if ss_res == 0.0 {
        1.0
    } else if ss_tot == 0.0 {
        0.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(SubpixelFit { delta, r_squared })
}

/// Slope of the ordinary least squares line through `(ln Z, ln bias)`.
pub fn loglog_slope(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 2 || samples.iter().any(|s| !(s.0 > 0.0 && s.1 > 0.0)) {
        return Err(Error::Degenerate("log-log slope needs >= 2 positive samples".into()));
    }
    let n = samples.len() as f64;
    let lx: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ly: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("log-log slope needs distinct depths".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Fraction of evaluated pixels with `|pred - gt| < x` for each threshold.
///
/// Evaluated pixels are those not occluded where both maps are valid.
pub fn disparity_error_curve(
    pred: &DisparityMap,
    gt: &DisparityMap,
    occluded: &[bool],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    check_same_size(gt.dims(), pred.dims())?;
    if occluded.len() != gt.values().len() {
        return Err(Error::InvalidParameter(format!(
            "occlusion mask has {} entries, expected {}",
            occluded.len(),
            gt.values().len()
        )));
    }
    let errs: Vec<f64> = (0..occluded.len())
        .filter(|p| !occluded[*p] && gt.valid()[*p] && pred.valid()[*p])
        .map(|p| (pred.values()[p] - gt.values()[p]).abs())
        .collect();
    if errs.is_empty() {
        return Err(Error::Degenerate("no pixels to evaluate".into()));
    }
    let n = errs.len() as f64;
    Ok(thresholds
        .iter()
        .map(|x| errs.iter().filter(|e| **e < *x).count() as f64 / n)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_abs_error: f64,
    pub count: usize,
}

/// Mean `|ref - recon|` over equal-width bins of the reference intensity on
/// `[0, 1]`. Empty bins report a count of 0 and error 0.
pub fn intensity_binned_error(reference: &Image, recon: &Image, mask: &[bool], n_bins: usize) -> Result<Vec<IntensityBin>> {
    check_same_size(reference.dims(), recon.dims())?;
    if n_bins < 2 {
        return Err(Error::InvalidParameter(format!("need >= 2 bins, got {n_bins}")));
    }
    if mask.len() != reference.data().len() {
        return Err(Error::InvalidParameter(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            reference.data().len()
        )));
    }
    let mut sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for ((a, b), m) in reference.data().iter().zip(recon.data()).zip(mask) {
        if !m {
            continue;
        }
        let k = ((a.clamp(0.0, 1.0) * n_bins as f64) as usize).min(n_bins - 1);
        sum[k] += (a - b).abs();
        count[k] += 1;
    }
    Ok((0..n_bins)
        .map(|k| IntensityBin {
            lo: k as f64 / n_bins as f64,
            hi: (k + 1) as f64 / n_bins as f64,
            mean_abs_error: if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 },
            count: count[k],
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub z_nominal: f64,
    pub bias_m: f64,
    pub jitter_m: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold_px: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub score: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub per_distance: Vec<DistanceRow>,
    pub delta_px: Option<f64>,
    pub fit_r2: Option<f64>,
    pub loglog_slope: Option<f64>,
    pub error_curve: Vec<CurvePoint>,
    pub ap: Vec<ApEntry>,
    pub ransac_seed: u64,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(config: serde_json::Value, ransac_seed: u64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            per_distance: Vec::new(),
            delta_px: None,
            fit_r2: None,
            loglog_slope: None,
            error_curve: Vec::new(),
            ap: Vec::new(),
            ransac_seed,
            config,
        }
    }

    /// Fills `delta_px`, `fit_r2` and `loglog_slope` from the distance rows
    /// when there are enough of them.
    pub fn fit_distances(&mut self, rig: &CameraRig) {
        let samples: Vec<(f64, f64)> = self.per_distance.iter().map(|r| (r.z_nominal, r.bias_m)).collect();
        if let Ok(fit) = fit_subpixel_delta(&samples, rig) {
            self.delta_px = Some(fit.delta);
            self.fit_r2 = Some(fit.r_squared);
        }
        self.loglog_slope = loglog_slope(&samples).ok();
    }

    /// `(Z, bias, jitter)` rows as CSV.
    pub fn distances_csv(&self) -> String {
        let mut s = String::from("z_nominal,bias_m,jitter_m,n_pixels\n");
        for r in &self.per_distance {
            s.push_str(&format!("{},{},{},{}\n", r.z_nominal, r.bias_m, r.jitter_m, r.n_pixels));
        }
        s
    }
}
