//! End-to-end matching and direct refinement of the disparity field.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_same_size, Error, Result};
use crate::image::{lcn_normalize, Image};
use crate::invalidation::{lr_check_with, LrSampling};
use crate::loss::{asw_pixel_coefficients, AswParams};
use crate::volume::{build_volume, guide_image, soft_argmin, wta_subpixel, Aggregation, CostKind, CostVolume, VolumeConfig};
use crate::warp::{warp_grad, warp_scanline, DisparityMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Readout {
    #[default]
    WtaSubpixel,
    SoftArgmin { temperature: f64 },
}

/// Aggregation window used by the refinement at a given iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowSchedule {
    /// The matcher's own ASW window throughout.
    #[default]
    Fixed,
    /// Start at `start_half_window` and halve every `halve_every` iterations
    /// until reaching the matcher's window.
    Graduated { start_half_window: usize, halve_every: usize },
}

impl WindowSchedule {
    pub fn graduated() -> Self {
        WindowSchedule::Graduated {
            start_half_window: 32,
            halve_every: 200,
        }
    }

    pub fn half_window(&self, iteration: usize, base: usize) -> usize {
        match *self {
            WindowSchedule::Fixed => base,
            WindowSchedule::Graduated {
                start_half_window,
                halve_every,
            } => {
                let halvings = (iteration / halve_every.max(1)).min(63) as u32;
                (start_half_window >> halvings).max(base)
            }
        }
    }
}

/// Gradient descent settings for [`refine_gd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdParams {
    pub steps: usize,
    pub learning_rate: f64,
    /// Multiplied into the learning rate after every step.
    pub lr_decay: f64,
    pub schedule: WindowSchedule,
    /// Weight of the Huber smoothness term on neighbouring disparities.
    pub smoothness: f64,
    pub huber_delta: f64,
    /// Consecutive objective increases tolerated before stopping.
    pub patience: usize,
}

impl Default for GdParams {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.3,
            lr_decay: 0.99,
            schedule: WindowSchedule::Fixed,
            smoothness: 0.0,
            huber_delta: 1.0,
            patience: 20,
        }
    }
}

impl GdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidParameter(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::InvalidParameter(format!("smoothness must be >= 0, got {}", self.smoothness)));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("huber_delta must be > 0, got {}", self.huber_delta)));
        }
        if self.patience == 0 {
            return Err(Error::InvalidParameter("patience must be >= 1".into()));
        }
        if let WindowSchedule::Graduated {
            start_half_window,
            halve_every,
        } = self.schedule
        {
            if start_half_window == 0 || halve_every == 0 {
                return Err(Error::InvalidParameter("graduated schedule needs positive window and period".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Refinement {
    #[default]
    Off,
    Gd(GdParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub cost: CostKind,
    pub aggregation: Aggregation,
    pub readout: Readout,
    pub d_min: usize,
    pub d_max: usize,
    pub refinement: Refinement,
    pub lr_theta: f64,
    pub lr_sampling: LrSampling,
    /// Pixels whose cost curve has `(mean - min) / mean` below this are
    /// invalidated before the left-right check; 0 disables the test.
    pub min_distinctiveness: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            cost: CostKind::wlcn(),
            aggregation: Aggregation::asw(16),
            readout: Readout::WtaSubpixel,
            d_min: 0,
            d_max: 63,
            refinement: Refinement::Off,
            lr_theta: 1.0,
            lr_sampling: LrSampling::Bilinear,
            min_distinctiveness: 0.25,
        }
    }
}

impl MatchConfig {
    /// Photometric cost without aggregation, the ablation baseline.
    pub fn photometric() -> Self {
        Self {
            cost: CostKind::Photometric,
            aggregation: Aggregation::None,
            ..Self::default()
        }
    }

    pub fn with_range(mut self, d_min: usize, d_max: usize) -> Self {
        self.d_min = d_min;
        self.d_max = d_max;
        self
    }

    pub fn volume(&self) -> VolumeConfig {
        VolumeConfig {
            cost: self.cost,
            aggregation: self.aggregation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_max <= self.d_min {
            return Err(Error::InvalidParameter(format!(
                "need d_max > d_min, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if !(self.lr_theta > 0.0) {
            return Err(Error::InvalidParameter(format!("lr_theta must be > 0, got {}", self.lr_theta)));
        }
        if !(0.0..=1.0).contains(&self.min_distinctiveness) {
            return Err(Error::InvalidParameter(format!(
                "min_distinctiveness must be in [0, 1], got {}",
                self.min_distinctiveness
            )));
        }
        if let CostKind::Wlcn { eta, radius } = self.cost {
            if !(eta > 0.0 && eta.is_finite()) || radius == 0 {
                return Err(Error::InvalidParameter(format!("bad LCN parameters eta={eta} radius={radius}")));
            }
        }
        if let Aggregation::Asw { params, .. } = self.aggregation {
            params.validate()?;
        }
        if let Readout::SoftArgmin { temperature } = self.readout {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
            }
        }
        if let Refinement::Gd(p) = self.refinement {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Left-reference disparity, before the consistency mask.
    pub left: DisparityMap,
    /// Right-reference disparity: right column `j` matches left column `j + d`.
    pub right: DisparityMap,
    /// Left pixels that survive the left-right check.
    pub valid: Vec<bool>,
    /// Set when the inputs carry no usable signal; `valid` is then empty.
    pub degenerate: Option<String>,
    pub trace_left: Vec<TraceRow>,
    pub trace_right: Vec<TraceRow>,
    pub timings: Vec<StageTiming>,
}

impl MatchResult {
    pub fn masked_left(&self) -> DisparityMap {
        self.left.masked(&self.valid)
    }
}

fn is_constant(img: &Image) -> bool {
    let (lo, hi) = img.min_max();
    hi - lo <= 1e-12 * hi.abs().max(1.0)
}

/// `(mean - min) / mean` of the valid costs of one pixel: 0 for a flat curve,
/// near 1 for a sharp, isolated minimum. `None` with fewer than two valid
/// planes.
pub fn distinctiveness(costs: &[f64], valid: &[bool]) -> Option<f64> {
    let (mut n, mut sum, mut lo) = (0usize, 0.0, f64::INFINITY);
    for (c, v) in costs.iter().zip(valid) {
        if *v {
            n += 1;
            sum += c;
            lo = lo.min(*c);
        }
    }
    if n < 2 {
        return None;
    }
    let mean = sum / n as f64;
    Some(if mean > 0.0 { (mean - lo) / mean } else { 0.0 })
}

/// Readout of one volume. Pixels whose cost curve is less distinctive than
/// `min_distinctiveness` carry no reliable match and are invalidated.
fn read_out(vol: &CostVolume, readout: Readout, min_distinctiveness: f64) -> Result<DisparityMap> {
    let d = match readout {
        Readout::WtaSubpixel => wta_subpixel(vol),
        Readout::SoftArgmin { temperature } => soft_argmin(vol, temperature)?,
    };
    let w = d.width();
    let mut keep = d.valid().to_vec();
    keep.par_iter_mut().enumerate().for_each(|(p, k)| {
        let (c, v) = vol.curve(p / w, p % w);
        if distinctiveness(c, v).is_some_and(|s| s < min_distinctiveness) {
            *k = false;
        }
    });
    Ok(d.masked(&keep))
}

/// Full matcher: left-reference and right-reference disparities from cost
/// volumes, optional gradient refinement of both, then the left-right check.
///
/// The right-reference problem is solved by mirroring both images and
/// swapping them, which turns it into a left-reference one.
pub fn match_pair(left: &Image, right: &Image, cfg: &MatchConfig) -> Result<MatchResult> {
    cfg.validate()?;
    check_same_size(left.dims(), right.dims())?;
    if left.is_empty() {
        return Err(Error::EmptyImage);
    }
    let (w, h) = left.dims();
    let mut timings = Vec::new();
    let mut stage = |name: &str, t: Instant| {
        timings.push(StageTiming {
            stage: name.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        })
    };
    if is_constant(left) || is_constant(right) {
        let empty = DisparityMap::from_raw(w, h, vec![0.0; w * h], vec![false; w * h]);
        return Ok(MatchResult {
            left: empty.clone(),
            right: empty,
            valid: vec![false; w * h],
            degenerate: Some("constant input image: no texture to match".into()),
            trace_left: Vec::new(),
            trace_right: Vec::new(),
            timings,
        });
    }
    let vcfg = cfg.volume();

    let t = Instant::now();
    let vol = build_volume(left, right, cfg.d_min, cfg.d_max, &vcfg)?;
    stage("volume_left", t);
    let t = Instant::now();
    let mut d_left = read_out(&vol, cfg.readout, cfg.min_distinctiveness)?;
    drop(vol);
    stage("readout_left", t);

    let left_m = left.flip_horizontal();
    let right_m = right.flip_horizontal();
    let t = Instant::now();
    let vol = build_volume(&right_m, &left_m, cfg.d_min, cfg.d_max, &vcfg)?;
    stage("volume_right", t);
    let t = Instant::now();
    let mut d_right_m = read_out(&vol, cfg.readout, cfg.min_distinctiveness)?;
    drop(vol);
    stage("readout_right", t);

    let (mut trace_left, mut trace_right) = (Vec::new(), Vec::new());
    if let Refinement::Gd(params) = cfg.refinement {
        let t = Instant::now();
        if d_left.valid_count() > 0 {
            let r = refine_gd(left, right, &d_left, cfg, &params)?;
            d_left = r.disparity;
            trace_left = r.trace;
        }
        if d_right_m.valid_count() > 0 {
            let r = refine_gd(&right_m, &left_m, &d_right_m, cfg, &params)?;
            d_right_m = r.disparity;
            trace_right = r.trace;
        }
        stage("refine", t);
    }
    let d_right = d_right_m.flip_horizontal();

    let t = Instant::now();
    let valid = lr_check_with(&d_left, &d_right, cfg.lr_theta, cfg.lr_sampling)?;
    stage("lr_check", t);
    Ok(MatchResult {
        left: d_left,
        right: d_right,
        valid,
        degenerate: None,
        trace_left,
        trace_right,
        timings,
    })
}

#[inline]
fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

/// The refinement objective `sum of aggregated costs + lambda * sum huber(grad d)`
/// of a left-reference disparity field, with its gradient.
///
/// The aggregated total is linear in the per-pixel costs,
/// `sum_ij C^_ij = sum_xy beta_xy C_xy`, with `beta` depending only on the
/// guide image and the set of contributing pixels, so the gradient at each
/// pixel is `beta_xy * dC_xy/dd_xy`. LCN statistics are fixed inputs.
pub struct RefineObjective {
    width: usize,
    height: usize,
    reference: Image,
    source: Image,
    weight: Option<Image>,
    guide: Option<(Image, f64)>,
    active: Vec<bool>,
    smoothness: f64,
    huber_delta: f64,
    beta: Option<(usize, Vec<f64>)>,
}

impl RefineObjective {
    /// `active` selects the pixels whose disparity is optimized; all others
    /// are ignored by both the cost and the smoothness term.
    pub fn new(left: &Image, right: &Image, active: &[bool], cfg: &MatchConfig, params: &GdParams) -> Result<Self> {
        check_same_size(left.dims(), right.dims())?;
        let (w, h) = left.dims();
        if active.len() != w * h {
            return Err(Error::InvalidParameter(format!("active mask has {} entries, expected {}", active.len(), w * h)));
        }
        let (reference, source, weight) = match cfg.cost {
            CostKind::Photometric => (left.clone(), right.clone(), None),
            CostKind::Wlcn { eta, radius } => {
                let (ll, stats) = lcn_normalize(left, eta, radius)?;
                let (lr, _) = lcn_normalize(right, eta, radius)?;
                (ll, lr, Some(stats.sigma))
            }
        };
        let guide = match cfg.aggregation {
            Aggregation::None => None,
            Aggregation::Asw { params, guide } => Some((guide_image(left, cfg.cost, guide)?, params.sigma_w_8bit)),
        };
        Ok(Self {
            width: w,
            height: h,
            reference,
            source,
            weight,
            guide,
            active: active.to_vec(),
            smoothness: params.smoothness,
            huber_delta: params.huber_delta,
            beta: None,
        })
    }

    fn beta(&mut self, mask: &[bool], half_window: usize) -> Result<&[f64]> {
        let stale = !matches!(&self.beta, Some((k, _)) if *k == half_window);
        if stale {
            let beta = match &self.guide {
                None => mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect(),
                Some((guide, sigma_w_8bit)) => {
                    let params = AswParams {
                        half_window,
                        sigma_w_8bit: *sigma_w_8bit,
                    };
                    params.validate()?;
                    asw_pixel_coefficients(mask, guide, &params)
                }
            };
            self.beta = Some((half_window, beta));
        }
        Ok(&self.beta.as_ref().unwrap().1)
    }

    /// Objective value and gradient at `d` (one value per pixel, inactive
    /// entries ignored). Every active pixel must sample inside the image.
    pub fn evaluate(&mut self, d: &[f64], half_window: usize) -> Result<(f64, Vec<f64>)> {
        let (w, h) = (self.width, self.height);
        if d.len() != w * h {
            return Err(Error::InvalidParameter(format!("disparity has {} entries, expected {}", d.len(), w * h)));
        }
        let dmap = DisparityMap::from_raw(w, h, d.to_vec(), self.active.clone());
        let (recon, mask) = warp_scanline(&self.source, &dmap)?;
        if mask != self.active {
            return Err(Error::InvalidParameter("active disparities must sample inside the image".into()));
        }
        let slope = warp_grad(&self.source, &dmap)?;
        let weight = self.weight.as_ref().map(|s| s.data().to_vec());
        let reference = self.reference.data().to_vec();
        let beta = self.beta(&mask, half_window)?.to_vec();
        let mut grad = vec![0.0; w * h];
        let mut partial = vec![0.0; h];
        grad.par_chunks_mut(w)
            .zip(partial.par_iter_mut())
            .enumerate()
            .for_each(|(i, (grow, acc))| {
                for j in 0..w {
                    let p = i * w + j;
                    if !mask[p] {
                        continue;
                    }
                    let sig = weight.as_ref().map_or(1.0, |s| s[p]);
                    let r = recon.data()[p] - reference[p];
                    *acc += beta[p] * sig * r.abs();
                    let sign = if r > 0.0 {
                        1.0
                    } else if r < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grow[j] = beta[p] * sig * sign * slope.data()[p];
                }
            });
        let mut value: f64 = partial.iter().sum();
        if self.smoothness > 0.0 {
            value += self.smoothness * self.smoothness_term(d, &mut grad);
        }
        Ok((value, grad))
    }

    /// Huber penalty over horizontal and vertical active neighbour pairs;
    /// adds `lambda * dpenalty/dd` into `grad`.
    fn smoothness_term(&self, d: &[f64], grad: &mut [f64]) -> f64 {
        let (w, h) = (self.width, self.height);
        let (lambda, delta, active) = (self.smoothness, self.huber_delta, &self.active);
        let mut partial = vec![0.0; h];
        grad.par_chunks_mut(w)
            .zip(partial.par_iter_mut())
            .enumerate()
            .for_each(|(i, (grow, acc))| {
                for j in 0..w {
                    let p = i * w + j;
                    if !active[p] {
                        continue;
                    }
                    let mut neighbours = [None; 4];
                    if j + 1 < w {
                        neighbours[0] = Some(p + 1);
                    }
                    if i + 1 < h {
                        neighbours[1] = Some(p + w);
                    }
                    if j > 0 {
                        neighbours[2] = Some(p - 1);
                    }
                    if i > 0 {
                        neighbours[3] = Some(p - w);
                    }
                    for (n, q) in neighbours.iter().enumerate() {
                        let Some(q) = *q else { continue };
                        if !active[q] {
                            continue;
                        }
                        let x = d[p] - d[q];
                        grow[j] += lambda * x.clamp(-delta, delta);
                        // each pair is counted once, from its left/top end
                        if n < 2 {
                            *acc += huber(x, delta);
                        }
                    }
                }
            });
        partial.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub half_window: usize,
    pub learning_rate: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub disparity: DisparityMap,
    pub trace: Vec<TraceRow>,
    pub best_iteration: usize,
    /// True when the divergence guard ended the run.
    pub diverged: bool,
}

/// Gradient descent on the aggregated self-supervised cost directly over the
/// disparity field, starting from `d_init` (left-reference).
///
/// Disparities are kept inside the search range and small enough that every
/// active pixel samples inside the right image, so the contributing set stays
/// fixed. Returns the iterate with the lowest objective under the final
/// aggregation window.
pub fn refine_gd(left: &Image, right: &Image, d_init: &DisparityMap, cfg: &MatchConfig, params: &GdParams) -> Result<Refined> {
    cfg.validate()?;
    params.validate()?;
    check_same_size(left.dims(), right.dims())?;
    check_same_size(left.dims(), d_init.dims())?;
    let (w, h) = left.dims();
    let lo = cfg.d_min as f64;
    let upper = |j: usize| (cfg.d_max as f64).min(j as f64);
    let active: Vec<bool> = (0..w * h)
        .map(|p| d_init.valid()[p] && lo <= upper(p % w))
        .collect();
    if !active.iter().any(|a| *a) {
        return Err(Error::InvalidParameter("refine_gd needs at least one valid starting disparity".into()));
    }
    let mut d: Vec<f64> = (0..w * h)
        .map(|p| if active[p] { d_init.values()[p].clamp(lo, upper(p % w)) } else { d_init.values()[p] })
        .collect();
    let base = match cfg.aggregation {
        Aggregation::Asw { params, .. } => params.half_window,
        Aggregation::None => 0,
    };
    let window_at = |t: usize| if base == 0 { 0 } else { params.schedule.half_window(t, base) };
    let mut objective = RefineObjective::new(left, right, &active, cfg, params)?;

    let mut lr = params.learning_rate;
    let mut k = window_at(0);
    let (mut f, mut g) = objective.evaluate(&d, k)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        half_window: k,
        learning_rate: lr,
        objective: f,
    }];
    let (mut best_f, mut best_d, mut best_t) = (f, d.clone(), 0);
    let (mut prev, mut rising, mut diverged) = (f, 0, false);
    for t in 1..=params.steps {
        d.par_iter_mut().zip(&g).enumerate().for_each(|(p, (dp, gp))| {
            if active[p] {
                *dp = (*dp - lr * gp).clamp(lo, upper(p % w));
            }
        });
        lr *= params.lr_decay;
        let k_next = window_at(t);
        (f, g) = objective.evaluate(&d, k_next)?;
        trace.push(TraceRow {
            iteration: t,
            half_window: k_next,
            learning_rate: lr,
            objective: f,
        });
        if k_next != k {
            // objectives under different windows are not comparable
            k = k_next;
            (best_f, best_d, best_t) = (f, d.clone(), t);
            (prev, rising) = (f, 0);
            continue;
        }
        if f < best_f {
            (best_f, best_d, best_t) = (f, d.clone(), t);
        }
        rising = if f > prev { rising + 1 } else { 0 };
        prev = f;
        if rising >= params.patience {
            diverged = true;
            break;
        }
    }
    Ok(Refined {
        disparity: DisparityMap::from_raw(w, h, best_d, active),
        trace,
        best_iteration: best_t,
        diverged,
    })
}

/// Writes an objective trace as CSV.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,half_window,learning_rate,objective\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.iteration, r.half_window, r.learning_rate, r.objective));
    }
    s
}
