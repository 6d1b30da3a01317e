//! Deterministic active-stereo renderer.
//!
//! Scenes are analytic (planes and axis-aligned boxes). Each pixel casts one
//! ray through its center. Surfaces are lit by a passive ambient term, a
//! value-noise texture attached to the surface, and a pseudorandom dot
//! pattern from a projector at the rig midpoint whose irradiance falls off
//! with the square of depth. Sensor noise is Gaussian with a standard
//! deviation that grows linearly with the noiseless intensity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_same_size, Error, Result};
use crate::geometry::CameraRig;
use crate::image::Image;
use crate::warp::DisparityMap;

/// Standard evaluation rig.
pub const STANDARD_FOCAL_PX: f64 = 560.0;
pub const STANDARD_BASELINE_M: f64 = 0.09;
pub const STANDARD_WIDTH: usize = 320;
pub const STANDARD_HEIGHT: usize = 240;
/// Wall distances of the fronto-parallel evaluation battery, meters.
pub const WALL_BATTERY_M: [f64; 7] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
pub const SLANT_ANGLE_DEG: f64 = 50.0;
/// Distance at which wall scenes use the unscaled projector power.
pub const EXPOSURE_REFERENCE_M: f64 = 2.0;
/// Threshold used to derive the stored occlusion mask from the gt maps.
pub const GT_OCCLUSION_THETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Points `p` with `normal . p = distance`.
    Plane { normal: [f64; 3], distance: f64, albedo: f64 },
    /// Axis-aligned box; `extents` are full side lengths.
    Box { center: [f64; 3], extents: [f64; 3], albedo: f64 },
}

impl Primitive {
    fn albedo(&self) -> f64 {
        match *self {
            Primitive::Plane { albedo, .. } | Primitive::Box { albedo, .. } => albedo,
        }
    }

    /// Smallest ray parameter `t > eps` of the hit, if any.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match *self {
            Primitive::Plane { normal, distance, .. } => {
                let den = dot(normal, dir);
                if den.abs() < 1e-15 {
                    return None;
                }
                let t = (distance - dot(normal, origin)) / den;
                (t > EPS).then_some(t)
            }
            Primitive::Box { center, extents, .. } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    let lo = center[a] - 0.5 * extents[a];
                    let hi = center[a] + 0.5 * extents[a];
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let albedo = self.albedo();
        if !(albedo > 0.0 && albedo <= 1.0) {
            return Err(Error::InvalidParameter(format!("albedo {albedo} outside (0, 1]")));
        }
        match *self {
            Primitive::Plane { normal, .. } => {
                let n = dot(normal, normal).sqrt();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!("plane normal has length {n}")));
                }
            }
            Primitive::Box { extents, .. } => {
                if extents.iter().any(|e| !(*e > 0.0)) {
                    return Err(Error::InvalidParameter("box extents must be > 0".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DotPattern {
    /// Probability that a projector pixel cell carries a dot.
    pub density: f64,
    /// Gaussian splat radius in projector pixels.
    pub sigma_px: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ambient {
    /// Mean passive illumination.
    pub level: f64,
    /// Relative amplitude of the surface texture, in `[0, 1)`.
    pub amplitude: f64,
    /// Texture frequency in cycles per meter.
    pub frequency: f64,
}

/// Sensor noise: standard deviation `sigma1 * I* + sigma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma1: 0.05,
            sigma2: 0.002,
        }
    }
}

impl NoiseModel {
    pub fn std_dev(&self, intensity: f64) -> f64 {
        self.sigma1 * intensity + self.sigma2
    }

    /// Pre-clamp noise sample for a noiseless intensity.
    pub fn sample<R: rand::Rng>(&self, intensity: f64, rng: &mut R) -> f64 {
        let sd = self.std_dev(intensity);
        if sd <= 0.0 {
            return 0.0;
        }
        Normal::new(0.0, sd).expect("finite std").sample(rng)
    }

    /// Observed intensity: noisy and clamped to `[0, 1]`.
    pub fn observe<R: rand::Rng>(&self, intensity: f64, rng: &mut R) -> f64 {
        (intensity + self.sample(intensity, rng)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub name: String,
    pub rig: CameraRig,
    pub width: usize,
    pub height: usize,
    pub primitives: Vec<Primitive>,
    pub dot_pattern: DotPattern,
    pub ambient: Ambient,
    pub noise: NoiseModel,
    /// Projector irradiance at 1 m; falls off as `k / Z^2`.
    pub falloff_k: f64,
    /// Largest admissible ground-truth disparity.
    #[serde(default = "default_max_disparity")]
    pub max_disparity: f64,
    pub seed: u64,
    /// Nominal wall distance for evaluation batteries.
    #[serde(default)]
    pub nominal_depth_m: Option<f64>,
}

fn default_max_disparity() -> f64 {
    160.0
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be nonzero".into()));
        }
        if self.primitives.is_empty() {
            return Err(Error::InvalidParameter("scene needs at least one primitive".into()));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        let dp = &self.dot_pattern;
        if !(dp.density > 0.0 && dp.density < 1.0) {
            return Err(Error::InvalidParameter(format!("dot density {} outside (0, 1)", dp.density)));
        }
        if dp.density * (self.width * self.height) as f64 <= 1.0 {
            return Err(Error::InvalidParameter("dot density too low for the image size".into()));
        }
        if !(dp.sigma_px > 0.0) || !(dp.gain >= 0.0) {
            return Err(Error::InvalidParameter("dot sigma must be > 0 and gain >= 0".into()));
        }
        let a = &self.ambient;
        if !(a.level >= 0.0) || !(0.0..1.0).contains(&a.amplitude) || !(a.frequency >= 0.0) {
            return Err(Error::InvalidParameter("ambient level/amplitude/frequency out of range".into()));
        }
        if !(self.noise.sigma1 >= 0.0 && self.noise.sigma2 >= 0.0) {
            return Err(Error::InvalidParameter("noise sigmas must be >= 0".into()));
        }
        if !(self.falloff_k > 0.0) {
            return Err(Error::InvalidParameter("falloff constant must be > 0".into()));
        }
        if !(self.max_disparity > 0.0) {
            return Err(Error::InvalidParameter("max disparity must be > 0".into()));
        }
        Ok(())
    }
}

/// Rendered stereo pair with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub left: Image,
    pub right: Image,
    pub gt_disp_left: DisparityMap,
    pub gt_disp_right: DisparityMap,
    /// True where the left pixel has no correspondence in the right view.
    pub occlusion_left: Vec<bool>,
    pub noiseless_left: Image,
    pub noiseless_right: Image,
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn hash3(seed: u64, a: i64, b: i64, c: i64) -> u64 {
    let h = mix64(seed ^ mix64(a as u64));
    let h = mix64(h ^ (b as u64));
    mix64(h ^ (c as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

#[inline]
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

const STREAM_DOTS: u64 = 0x646f7473;
const STREAM_AMBIENT: u64 = 0x616d6269;

/// Sum of Gaussian dot splats at projector-plane position `(u, v)`.
fn dot_field(pattern: &DotPattern, seed: u64, u: f64, v: f64) -> f64 {
    let reach = (4.0 * pattern.sigma_px).ceil() as i64 + 1;
    let (cu, cv) = (u.floor() as i64, v.floor() as i64);
    let inv = 1.0 / (2.0 * pattern.sigma_px * pattern.sigma_px);
    let seed = seed ^ STREAM_DOTS;
    let mut sum = 0.0;
    for m in cu - reach..=cu + reach {
        for n in cv - reach..=cv + reach {
            if unit(hash3(seed, m, n, 0)) >= pattern.density {
                continue;
            }
            let du = u - (m as f64 + unit(hash3(seed, m, n, 1)));
            let dv = v - (n as f64 + unit(hash3(seed, m, n, 2)));
            sum += (-(du * du + dv * dv) * inv).exp();
        }
    }
    sum
}

/// Smooth 3D value noise in `[0, 1]`.
fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let seed = seed ^ STREAM_AMBIENT;
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let f = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let b = base.map(|v| v as i64);
    let lattice = |dx: i64, dy: i64, dz: i64| unit(hash3(seed, b[0] + dx, b[1] + dy, b[2] + dz));
    let lerp = |a: f64, c: f64, t: f64| a + (c - a) * t;
    let x00 = lerp(lattice(0, 0, 0), lattice(1, 0, 0), s[0]);
    let x10 = lerp(lattice(0, 1, 0), lattice(1, 1, 0), s[0]);
    let x01 = lerp(lattice(0, 0, 1), lattice(1, 0, 1), s[0]);
    let x11 = lerp(lattice(0, 1, 1), lattice(1, 1, 1), s[0]);
    lerp(lerp(x00, x10, s[1]), lerp(x01, x11, s[1]), s[2])
}

struct Hit {
    depth: f64,
    point: [f64; 3],
    albedo: f64,
}

fn cast(primitives: &[Primitive], origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, usize)> {
    primitives
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.intersect(origin, dir).map(|t| (t, k)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

fn trace(spec: &SceneSpec, origin: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
    let (t, k) = cast(&spec.primitives, origin, dir)?;
    let point = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
    Some(Hit {
        depth: point[2],
        point,
        albedo: spec.primitives[k].albedo(),
    })
}

/// Noiseless intensity of a visible surface point.
fn shade(spec: &SceneSpec, hit: &Hit) -> f64 {
    let p = hit.point;
    let a = &spec.ambient;
    let f = a.frequency;
    let texture = value_noise(spec.seed, [p[0] * f, p[1] * f, p[2] * f]);
    let ambient = a.level * (1.0 + a.amplitude * (2.0 * texture - 1.0));
    let projector = [0.5 * spec.rig.baseline_m, 0.0, 0.0];
    let to_point = [p[0] - projector[0], p[1] - projector[1], p[2] - projector[2]];
    let mut dots = 0.0;
    if spec.dot_pattern.gain > 0.0 && to_point[2] > 0.0 {
        // shadowed if the projector ray meets geometry before the point
        let lit = match cast(&spec.primitives, projector, to_point) {
            Some((t, _)) => t >= 1.0 - 1e-7,
            None => true,
        };
        if lit {
            let u = spec.rig.focal_px * to_point[0] / to_point[2];
            let v = spec.rig.focal_px * to_point[1] / to_point[2];
            dots = spec.dot_pattern.gain * dot_field(&spec.dot_pattern, spec.seed, u, v) * spec.falloff_k
                / (hit.depth * hit.depth);
        }
    }
    (hit.albedo * (ambient + dots)).clamp(0.0, 1.0)
}

struct View {
    noiseless: Image,
    observed: Image,
    disparity: DisparityMap,
}

fn render_view(spec: &SceneSpec, camera_x: f64, stream: u64) -> Result<View> {
    let (w, h) = (spec.width, spec.height);
    let bf = spec.rig.bf();
    let rows: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((stream << 32) | i as u64);
            let mut clean = Vec::with_capacity(w);
            let mut noisy = Vec::with_capacity(w);
            let mut disp = Vec::with_capacity(w);
            for j in 0..w {
                let dir = spec.rig.pixel_ray(i as f64, j as f64, w, h);
                let hit = trace(spec, [camera_x, 0.0, 0.0], dir)
                    .ok_or_else(|| Error::Render(format!("ray through pixel ({i}, {j}) hits no geometry")))?;
                let d = bf / hit.depth;
                if d > spec.max_disparity {
                    return Err(Error::Render(format!(
                        "disparity {d:.2} at pixel ({i}, {j}) exceeds max {}",
                        spec.max_disparity
                    )));
                }
                let star = shade(spec, &hit);
                clean.push(star);
                noisy.push(spec.noise.observe(star, &mut rng));
                disp.push(d);
            }
            Ok((clean, noisy, disp))
        })
        .collect();
    let mut clean = Vec::with_capacity(w * h);
    let mut noisy = Vec::with_capacity(w * h);
    let mut disp = Vec::with_capacity(w * h);
    for row in rows {
        let (c, n, d) = row?;
        clean.extend(c);
        noisy.extend(n);
        disp.extend(d);
    }
    Ok(View {
        noiseless: Image::from_raw(w, h, clean),
        observed: Image::from_raw(w, h, noisy),
        disparity: DisparityMap::from_raw(w, h, disp, vec![true; w * h]),
    })
}

/// Renders both views of a scene. Identical specs give bit-identical output.
pub fn render_pair(spec: &SceneSpec) -> Result<RenderedPair> {
    spec.validate()?;
    let left = render_view(spec, 0.0, 0)?;
    let right = render_view(spec, spec.rig.baseline_m, 1)?;
    let occlusion_left = gt_occlusion(&left.disparity, &right.disparity, GT_OCCLUSION_THETA)?;
    Ok(RenderedPair {
        left: left.observed,
        right: right.observed,
        gt_disp_left: left.disparity,
        gt_disp_right: right.disparity,
        occlusion_left,
        noiseless_left: left.noiseless,
        noiseless_right: right.noiseless,
    })
}

/// Ground-truth occlusion: the left pixel is occluded when its
/// correspondence leaves the right image or the right view sees a surface
/// whose disparity differs by at least `theta`.
pub fn gt_occlusion(gt_disp_left: &DisparityMap, gt_disp_right: &DisparityMap, theta: f64) -> Result<Vec<bool>> {
    check_same_size(gt_disp_left.dims(), gt_disp_right.dims())?;
    let (w, h) = gt_disp_left.dims();
    let mut out = vec![true; w * h];
    for i in 0..h {
        for j in 0..w {
            if !gt_disp_left.is_valid(i, j) {
                continue;
            }
            let dl = gt_disp_left.get(i, j);
            let x = j as f64 - dl.round();
            if x < 0.0 || x > (w - 1) as f64 {
                continue;
            }
            let x = x as usize;
            if !gt_disp_right.is_valid(i, x) {
                continue;
            }
            out[i * w + j] = (dl - gt_disp_right.get(i, x)).abs() >= theta;
        }
    }
    Ok(out)
}

fn base_scene(name: &str, primitives: Vec<Primitive>, seed: u64) -> SceneSpec {
    SceneSpec {
        name: name.to_string(),
        rig: CameraRig {
            focal_px: STANDARD_FOCAL_PX,
            baseline_m: STANDARD_BASELINE_M,
        },
        width: STANDARD_WIDTH,
        height: STANDARD_HEIGHT,
        primitives,
        dot_pattern: DotPattern {
            density: 0.1,
            sigma_px: 1.0,
            gain: 1.5,
        },
        ambient: Ambient {
            level: 0.1,
            amplitude: 0.5,
            frequency: 3.0,
        },
        noise: NoiseModel::default(),
        falloff_k: 1.0,
        max_disparity: default_max_disparity(),
        seed,
        nominal_depth_m: None,
    }
}

/// Fronto-parallel wall at `z` meters.
///
/// The projector power is scaled with `z^2` (an auto-exposure stand-in) so
/// every wall of the battery receives the dot irradiance of the 2 m wall.
pub fn wall_scene(z: f64) -> SceneSpec {
    let mut s = base_scene(
        &format!("wall_{z:.1}"),
        vec![Primitive::Plane {
            normal: [0.0, 0.0, 1.0],
            distance: z,
            albedo: 0.8,
        }],
        7,
    );
    s.falloff_k = (z / EXPOSURE_REFERENCE_M).powi(2);
    s.nominal_depth_m = Some(z);
    s
}

/// Wall rotated about the vertical axis by `angle_deg`, crossing the optical
/// axis at `z` meters.
pub fn slanted_wall_scene(z: f64, angle_deg: f64) -> SceneSpec {
    let a = angle_deg.to_radians();
    let normal = [a.sin(), 0.0, a.cos()];
    let mut s = base_scene(
        &format!("slant_{angle_deg:.0}"),
        vec![Primitive::Plane {
            normal,
            distance: a.cos() * z,
            albedo: 0.8,
        }],
        11,
    );
    s.nominal_depth_m = Some(z);
    s
}

/// Box floating in front of a wall at 2 m.
pub fn box_scene() -> SceneSpec {
    base_scene(
        "box",
        vec![
            Primitive::Plane {
                normal: [0.0, 0.0, 1.0],
                distance: 2.0,
                albedo: 0.8,
            },
            Primitive::Box {
                center: [0.03, 0.0, 1.2],
                extents: [0.25, 0.25, 0.2],
                albedo: 0.9,
            },
        ],
        13,
    )
}

/// Wall at 2 m with no projected dots and no surface texture.
pub fn textureless_scene() -> SceneSpec {
    let mut s = wall_scene(EXPOSURE_REFERENCE_M);
    s.name = "textureless".into();
    s.dot_pattern.gain = 0.0;
    s.ambient.level = 0.3;
    s.ambient.amplitude = 0.0;
    s.seed = 17;
    s
}

/// The evaluation battery: seven fronto walls, a slanted wall, the box
/// occlusion scene and the textureless scene.
pub fn standard_scenes() -> Vec<SceneSpec> {
    let mut v: Vec<SceneSpec> = WALL_BATTERY_M.iter().map(|&z| wall_scene(z)).collect();
    v.push(slanted_wall_scene(2.0, SLANT_ANGLE_DEG));
    v.push(box_scene());
    v.push(textureless_scene());
    v
}

/// Resolves a builtin scene name: `wall:<meters>`, `slant[:<degrees>]`,
/// `box` or `textureless`.
pub fn builtin_scene(name: &str) -> Result<SceneSpec> {
    let (kind, arg) = match name.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (name, None),
    };
    let num = |a: Option<&str>| -> Result<Option<f64>> {
        a.map(|s| s.parse::<f64>().map_err(|_| Error::InvalidParameter(format!("bad number in builtin '{name}'"))))
            .transpose()
    };
    match kind {
        "wall" => {
            let z = num(arg)?.ok_or_else(|| Error::InvalidParameter("wall needs a distance, e.g. wall:2.0".into()))?;
            if !(z > 0.0) {
                return Err(Error::InvalidParameter(format!("wall distance must be > 0, got {z}")));
            }
            Ok(wall_scene(z))
        }
        "slant" => Ok(slanted_wall_scene(2.0, num(arg)?.unwrap_or(SLANT_ANGLE_DEG))),
        "box" if arg.is_none() => Ok(box_scene()),
        "textureless" if arg.is_none() => Ok(textureless_scene()),
        _ => Err(Error::InvalidParameter(format!("unknown builtin scene '{name}'"))),
    }
}
