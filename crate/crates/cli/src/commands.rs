use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use stereolab::eval::{disparity_error_curve, evaluate_wall, ApEntry, CurvePoint, DistanceRow, EvalReport};
use stereolab::invalidation::{lr_confidence, mask_ap, photometric_confidence_masked, ConfidenceMap, LrSampling};
use stereolab::io::*;
use stereolab::matcher::{match_pair, trace_csv, MatchConfig, MatchResult, Refinement, StageTiming};
use stereolab::synth::{builtin_scene, render_pair, standard_scenes, wall_scene, Primitive, RenderedPair, SceneSpec};
use stereolab::volume::{build_volume, landscape as cost_curve, Aggregation, CostKind};
use stereolab::warp::warp_scanline;
use stereolab::{DisparityMap, Error, Image};

use crate::manifest::RunManifest;
use crate::{BenchArgs, EvalArgs, GenArgs, LandscapeArgs, MatchArgs, MatchOverrides};

const DEFAULT_RANSAC_SEED: u64 = 7;
const ERROR_CURVE_PX: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) | Error::Format(_) | Error::Json(_) => CliError::Io(msg),
            Error::InvalidParameter(_) => CliError::Usage(msg),
            _ => CliError::Numerical(msg),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Attaches the file name to file-level failures.
fn at<T>(r: stereolab::Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

// ---------- gen ----------

fn write_pair(dir: &Path, spec: &SceneSpec, pair: &RenderedPair, preview: bool) -> Result<Vec<PathBuf>> {
    let (w, h) = pair.left.dims();
    let mut out = Vec::new();
    let mut put = |name: &str, r: &dyn Fn(&Path) -> stereolab::Result<()>| -> Result<()> {
        let p = dir.join(name);
        at(r(&p), &p)?;
        out.push(p);
        Ok(())
    };
    put("left.pfm", &|p| write_image_pfm(p, &pair.left))?;
    put("right.pfm", &|p| write_image_pfm(p, &pair.right))?;
    put("gt_left.pfm", &|p| write_disparity_pfm(p, &pair.gt_disp_left))?;
    put("gt_right.pfm", &|p| write_disparity_pfm(p, &pair.gt_disp_right))?;
    put("occlusion.pgm", &|p| write_mask_pgm(p, w, h, &pair.occlusion_left))?;
    put("scene.json", &|p| write_json(p, spec))?;
    if preview {
        put("left.png", &|p| write_preview_png(p, &pair.left))?;
        put("right.png", &|p| write_preview_png(p, &pair.right))?;
    }
    Ok(out)
}

pub fn gen(a: &GenArgs, seed: Option<u64>) -> Result<()> {
    let mut m = RunManifest::new("gen");
    let scenes: Vec<(Option<String>, SceneSpec)> = if a.battery {
        standard_scenes().into_iter().map(|s| (Some(s.name.clone()), s)).collect()
    } else if let Some(name) = &a.builtin {
        vec![(None, builtin_scene(name)?)]
    } else {
        let p = a.spec.as_ref().expect("clap enforces a source");
        m.inputs.push(p.clone());
        vec![(None, at(read_json(p), p)?)]
    };
    mkdir(&a.out)?;
    let mut specs = Vec::new();
    for (sub, mut spec) in scenes {
        if let Some(s) = seed {
            spec.seed = s;
        }
        let dir = sub.map_or_else(|| a.out.clone(), |n| a.out.join(n));
        mkdir(&dir)?;
        let t = Instant::now();
        let pair = render_pair(&spec)?;
        m.time(&format!("render:{}", spec.name), t.elapsed().as_secs_f64());
        m.seeds.insert(spec.name.clone(), spec.seed);
        m.outputs.extend(write_pair(&dir, &spec, &pair, a.preview)?);
        specs.push(spec);
    }
    m.config = json!({
        "builtin": a.builtin,
        "spec": a.spec,
        "battery": a.battery,
        "scenes": specs,
    });
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}

// ---------- match ----------

fn matcher_config(o: &MatchOverrides, inputs: &mut Vec<PathBuf>) -> Result<MatchConfig> {
    let mut cfg: MatchConfig = match &o.config {
        Some(p) => {
            inputs.push(p.clone());
            at(read_json(p), p)?
        }
        None => MatchConfig::default(),
    };
    if o.photometric {
        cfg.cost = CostKind::Photometric;
        cfg.aggregation = Aggregation::None;
    }
    if let Some(d) = o.d_min {
        cfg.d_min = d;
    }
    if let Some(d) = o.d_max {
        cfg.d_max = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_pair(dir: &Path, inputs: &mut Vec<PathBuf>) -> Result<(Image, Image)> {
    let (lp, rp) = (dir.join("left.pfm"), dir.join("right.pfm"));
    let left = at(read_image_pfm(&lp), &lp)?;
    let right = at(read_image_pfm(&rp), &rp)?;
    inputs.extend([lp, rp]);
    Ok((left, right))
}

pub fn run_match(a: &MatchArgs, seed: Option<u64>) -> Result<()> {
    let mut m = RunManifest::new("match");
    let mut cfg = matcher_config(&a.overrides, &mut m.inputs)?;
    if let Some(t) = a.lr_theta {
        cfg.lr_theta = t;
    }
    if let Some(s) = a.min_distinctiveness {
        cfg.min_distinctiveness = s;
    }
    cfg.validate()?;
    let (left, right) = read_pair(&a.pair, &mut m.inputs)?;
    if let Some(s) = seed {
        // the matcher draws no random numbers; recorded for completeness
        m.seeds.insert("seed".into(), s);
    }
    let t = Instant::now();
    let r = match_pair(&left, &right, &cfg)?;
    let total = t.elapsed().as_secs_f64();
    if let Some(why) = &r.degenerate {
        return Err(CliError::Numerical(format!("degenerate input: {why}")));
    }
    m.timings.extend(r.timings.iter().cloned());
    m.time("match_total", total);
    mkdir(&a.out)?;
    m.outputs.extend(write_match(&a.out, &r, &cfg)?);
    m.config = to_json(&cfg);
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}

fn write_match(dir: &Path, r: &MatchResult, cfg: &MatchConfig) -> Result<Vec<PathBuf>> {
    let (w, h) = r.left.dims();
    let mut out = Vec::new();
    let mut put = |name: &str, f: &dyn Fn(&Path) -> stereolab::Result<()>| -> Result<()> {
        let p = dir.join(name);
        at(f(&p), &p)?;
        out.push(p);
        Ok(())
    };
    put("disparity_left.pfm", &|p| write_disparity_pfm(p, &r.left))?;
    put("disparity_right.pfm", &|p| write_disparity_pfm(p, &r.right))?;
    put("valid.pgm", &|p| write_mask_pgm(p, w, h, &r.valid))?;
    put("config.json", &|p| write_json(p, cfg))?;
    if matches!(cfg.refinement, Refinement::Gd(_)) {
        put("trace_left.csv", &|p| Ok(fs::write(p, trace_csv(&r.trace_left))?))?;
        put("trace_right.csv", &|p| Ok(fs::write(p, trace_csv(&r.trace_right))?))?;
    }
    Ok(out)
}

// ---------- eval ----------

struct Case {
    name: String,
    spec: SceneSpec,
    gt: DisparityMap,
    occluded: Vec<bool>,
    /// Left disparity with the validity mask of the run applied.
    pred: DisparityMap,
    /// Scores for the invalidation AP, when the run has both views.
    scores: Option<(ConfidenceMap, ConfidenceMap)>,
    matcher: Option<serde_json::Value>,
}

fn load_case(pred_dir: &Path, gt_dir: &Path, inputs: &mut Vec<PathBuf>) -> Result<Case> {
    let mut read_disp = |p: PathBuf| -> Result<DisparityMap> {
        let d = at(read_disparity_pfm(&p), &p)?;
        inputs.push(p);
        Ok(d)
    };
    let gt = read_disp(gt_dir.join("gt_left.pfm"))?;
    let raw = read_disp(pred_dir.join("disparity_left.pfm"))?;
    if raw.dims() != gt.dims() {
        return Err(Error::SizeMismatch {
            expected: gt.dims(),
            got: raw.dims(),
        }
        .into());
    }
    let sp = gt_dir.join("scene.json");
    let spec: SceneSpec = at(read_json(&sp), &sp)?;
    let op = gt_dir.join("occlusion.pgm");
    let (ow, oh, occluded) = at(read_mask_pgm(&op), &op)?;
    if (ow, oh) != gt.dims() {
        return Err(Error::SizeMismatch {
            expected: gt.dims(),
            got: (ow, oh),
        }
        .into());
    }
    inputs.extend([sp, op]);

    let vp = pred_dir.join("valid.pgm");
    let pred = if vp.exists() {
        let (vw, vh, mask) = at(read_mask_pgm(&vp), &vp)?;
        if (vw, vh) != raw.dims() {
            return Err(Error::SizeMismatch {
                expected: raw.dims(),
                got: (vw, vh),
            }
            .into());
        }
        inputs.push(vp);
        raw.masked(&mask)
    } else {
        raw.clone()
    };

    let rp = pred_dir.join("disparity_right.pfm");
    let scores = if rp.exists() && gt_dir.join("left.pfm").exists() {
        let right_d = at(read_disparity_pfm(&rp), &rp)?;
        inputs.push(rp);
        let (li, ri) = read_pair(gt_dir, inputs)?;
        let lr = lr_confidence(&raw, &right_d, 1.0, LrSampling::Bilinear)?;
        let (recon, mask) = warp_scanline(&ri, &raw)?;
        Some((lr, photometric_confidence_masked(&li, &recon, &mask)?))
    } else {
        None
    };
    let cp = pred_dir.join("config.json");
    let matcher = if cp.exists() {
        inputs.push(cp.clone());
        Some(at(read_json::<serde_json::Value>(&cp), &cp)?)
    } else {
        None
    };
    Ok(Case {
        name: spec.name.clone(),
        spec,
        gt,
        occluded,
        pred,
        scores,
        matcher,
    })
}

/// A single dot-lit fronto-parallel plane, the geometry the bias/jitter
/// law is stated for.
fn is_fronto_wall(spec: &SceneSpec) -> bool {
    spec.dot_pattern.gain > 0.0
        && matches!(spec.primitives.as_slice(), [Primitive::Plane { normal, .. }] if normal[2] >= 1.0 - 1e-12)
}

/// Stacks maps of equal width vertically.
fn stack(maps: &[&DisparityMap]) -> Result<DisparityMap> {
    let w = maps[0].width();
    if maps.iter().any(|m| m.width() != w) {
        return Err(CliError::Numerical("scenes of different widths cannot be pooled".into()));
    }
    let h = maps.iter().map(|m| m.height()).sum();
    let values = maps.iter().flat_map(|m| m.values().iter().copied()).collect();
    let valid = maps.iter().flat_map(|m| m.valid().iter().copied()).collect();
    Ok(DisparityMap::new(w, h, values, valid)?)
}

pub fn eval(a: &EvalArgs, seed: Option<u64>) -> Result<()> {
    let mut m = RunManifest::new("eval");
    let ransac_seed = seed.unwrap_or(DEFAULT_RANSAC_SEED);
    m.seeds.insert("ransac".into(), ransac_seed);
    let t = Instant::now();

    let cases = if a.gt.join("scene.json").exists() {
        vec![load_case(&a.pred, &a.gt, &mut m.inputs)?]
    } else {
        let entries = fs::read_dir(&a.gt).map_err(|e| CliError::Io(format!("{}: {e}", a.gt.display())))?;
        let mut names: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("scene.json").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(CliError::Io(format!("{}: no scene.json found", a.gt.display())));
        }
        names
            .iter()
            .map(|n| load_case(&a.pred.join(n), &a.gt.join(n), &mut m.inputs))
            .collect::<Result<Vec<_>>>()?
    };
    m.time("load", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let config = json!({
        "pred": a.pred,
        "gt": a.gt,
        "ransac_iterations": a.ransac_iterations,
        "scenes": cases.iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
        "matcher": cases.iter().find_map(|c| c.matcher.clone()),
    });
    let mut report = EvalReport::new(config.clone(), ransac_seed);

    let pred = stack(&cases.iter().map(|c| &c.pred).collect::<Vec<_>>())?;
    let gt = stack(&cases.iter().map(|c| &c.gt).collect::<Vec<_>>())?;
    let occluded: Vec<bool> = cases.iter().flat_map(|c| c.occluded.iter().copied()).collect();
    let curve = disparity_error_curve(&pred, &gt, &occluded, &ERROR_CURVE_PX)?;
    report.error_curve = ERROR_CURVE_PX
        .iter()
        .zip(curve)
        .map(|(x, f)| CurvePoint {
            threshold_px: *x,
            fraction: f,
        })
        .collect();

    let mut walls: Vec<&Case> = cases
        .iter()
        .filter(|c| c.spec.nominal_depth_m.is_some() && is_fronto_wall(&c.spec))
        .collect();
    walls.sort_by(|x, y| x.spec.nominal_depth_m.partial_cmp(&y.spec.nominal_depth_m).unwrap());
    for c in &walls {
        let ev = evaluate_wall(&c.pred, &c.spec.rig, a.ransac_iterations, ransac_seed)
            .map_err(|e| CliError::Numerical(format!("{}: {e}", c.name)))?;
        report.per_distance.push(DistanceRow {
            z_nominal: c.spec.nominal_depth_m.unwrap(),
            bias_m: ev.stats.bias,
            jitter_m: ev.stats.jitter,
            n_pixels: ev.stats.n_pixels,
        });
    }
    if let Some(c) = walls.first() {
        report.fit_distances(&c.spec.rig);
    }

    let scored: Vec<&Case> = cases.iter().filter(|c| c.scores.is_some()).collect();
    let gt_occ: Vec<bool> = scored.iter().flat_map(|c| c.occluded.iter().copied()).collect();
    if gt_occ.iter().any(|o| *o) {
        for (name, pick) in [("lr_residual", 0), ("photometric", 1)] {
            let scores: Vec<f64> = scored
                .iter()
                .flat_map(|c| {
                    let (lr, ph) = c.scores.as_ref().unwrap();
                    if pick == 0 { lr } else { ph }.scores().to_vec()
                })
                .collect();
            let map = ConfidenceMap::new(scores.len(), 1, scores, 0.0)?;
            report.ap.push(ApEntry {
                score: name.into(),
                ap: mask_ap(&map, &gt_occ)?,
            });
        }
    }
    m.time("evaluate", t.elapsed().as_secs_f64());

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    at(write_json(&a.out, &report), &a.out)?;
    m.outputs.push(a.out.clone());
    if let Some(csv) = &a.csv {
        write_text(csv, &report.distances_csv())?;
        m.outputs.push(csv.clone());
    }
    m.config = config;
    m.write(&a.out.with_extension("manifest.json"))?;
    Ok(())
}

// ---------- landscape ----------

pub fn landscape(a: &LandscapeArgs) -> Result<()> {
    let mut m = RunManifest::new("landscape");
    let mut cfg = matcher_config(&a.overrides, &mut m.inputs)?;
    if a.single_pixel {
        cfg.aggregation = Aggregation::None;
    }
    let (left, right) = read_pair(&a.pair, &mut m.inputs)?;
    let (w, h) = left.dims();
    if let Some((r, c)) = a.pixels.iter().find(|(r, c)| *r >= h || *c >= w) {
        return Err(CliError::Usage(format!("pixel ({r}, {c}) outside the {w}x{h} image")));
    }
    let gp = a.pair.join("gt_left.pfm");
    let gt = if gp.exists() {
        m.inputs.push(gp.clone());
        Some(at(read_disparity_pfm(&gp), &gp)?)
    } else {
        None
    };
    let t = Instant::now();
    let vol = build_volume(&left, &right, cfg.d_min, cfg.d_max, &cfg.volume())?;
    m.time("volume", t.elapsed().as_secs_f64());
    let mut csv = String::from("row,col,disparity,cost,valid,gt_disparity\n");
    for &(r, c) in &a.pixels {
        let g = gt
            .as_ref()
            .filter(|g| g.is_valid(r, c))
            .map_or(String::new(), |g| g.get(r, c).to_string());
        for (d, cost) in cost_curve(&vol, r, c)? {
            let cost_s = cost.map_or(String::new(), |v| v.to_string());
            csv.push_str(&format!("{r},{c},{d},{cost_s},{},{g}\n", cost.is_some() as u8));
        }
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    write_text(&a.out, &csv)?;
    m.outputs.push(a.out.clone());
    m.config = json!({ "matcher": cfg, "single_pixel": a.single_pixel, "pixels": a.pixels });
    m.write(&a.out.with_extension("manifest.json"))?;
    Ok(())
}

// ---------- bench ----------

#[derive(Debug, Serialize)]
struct ThreadRun {
    threads: usize,
    total_seconds: f64,
    volume_seconds: f64,
    volume_speedup: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    width: usize,
    height: usize,
    d_min: usize,
    d_max: usize,
    threads: usize,
    stages: Vec<StageTiming>,
    total_seconds: f64,
    thread_runs: Vec<ThreadRun>,
    identical_across_threads: Option<bool>,
}

fn volume_seconds(r: &MatchResult) -> f64 {
    r.timings.iter().filter(|t| t.stage.starts_with("volume")).map(|t| t.seconds).sum()
}

pub fn bench(a: &BenchArgs, seed: Option<u64>) -> Result<()> {
    let mut m = RunManifest::new("bench");
    let mut cfg = matcher_config(&a.overrides, &mut m.inputs)?;
    if a.overrides.d_max.is_none() && a.overrides.config.is_none() {
        cfg.d_max = 63;
    }
    cfg.validate()?;
    let mut spec = wall_scene(2.0);
    spec.width = a.width;
    spec.height = a.height;
    if let Some(s) = seed {
        spec.seed = s;
    }
    m.seeds.insert("scene".into(), spec.seed);
    let pair = render_pair(&spec)?;

    let timed = |cfg: &MatchConfig| -> Result<(MatchResult, f64)> {
        let t = Instant::now();
        let r = match_pair(&pair.left, &pair.right, cfg)?;
        Ok((r, t.elapsed().as_secs_f64()))
    };
    let (base, total) = timed(&cfg)?;
    let mut thread_runs = Vec::new();
    let mut identical = None;
    for &n in &a.compare_threads {
        if n == 0 {
            return Err(CliError::Usage("thread counts must be >= 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
        let (r, secs) = pool.install(|| timed(&cfg))?;
        let same = r.left == base.left && r.right == base.right && r.valid == base.valid;
        identical = Some(identical.unwrap_or(true) && same);
        thread_runs.push(ThreadRun {
            threads: n,
            total_seconds: secs,
            volume_seconds: volume_seconds(&r),
            volume_speedup: 0.0,
        });
    }
    if let Some(first) = thread_runs.first().map(|r| r.volume_seconds) {
        for r in &mut thread_runs {
            r.volume_speedup = first / r.volume_seconds;
        }
    }
    let report = BenchReport {
        width: a.width,
        height: a.height,
        d_min: cfg.d_min,
        d_max: cfg.d_max,
        threads: rayon::current_num_threads(),
        stages: base.timings.clone(),
        total_seconds: total,
        thread_runs,
        identical_across_threads: identical,
    };
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &(text + "\n"))?;
        m.outputs.push(out.clone());
        m.timings = base.timings;
        m.time("match_total", total);
        m.config = json!({ "matcher": cfg, "width": a.width, "height": a.height, "compare_threads": a.compare_threads });
        m.write(&out.with_extension("manifest.json"))?;
    }
    Ok(())
}
