//! Deterministic synthetic scenes: paired camera image, LiDAR cloud,
//! calibration and ground truth.
//!
//! Boxes sit on the ground plane z = 0. Placement rejects candidates that
//! overlap in BEV, share a camera azimuth interval with an earlier box, or
//! project outside the image, so every ground-truth box is fully visible;
//! the LiDAR is a ray grid from the sensor with per-ray dropout and Gaussian
//! range noise.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::lidar::{CameraModel, LidarPoint, PointCloud};
use crate::{Error, Result};

/// Ground-truth box on the BEV plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneGt {
    pub boxes: Vec<GtBox>,
}

/// Solid box used by the generator: footprint l (local x) by w (local y),
/// standing on the ground with height h.
#[derive(Debug, Clone, Copy)]
pub struct Box3 {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub albedo: [f64; 3],
}

impl Box3 {
    pub fn gt(&self) -> GtBox {
        GtBox { cx: self.cx, cy: self.cy, w: self.w, l: self.l, yaw: self.yaw }
    }

    /// BEV footprint corners, world frame.
    pub fn footprint(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [(0.0, 0.0); 4];
        for (i, (lx, ly)) in [(0.5, 0.5), (0.5, -0.5), (-0.5, -0.5), (-0.5, 0.5)].iter().enumerate() {
            let bx = lx * self.l;
            let by = ly * self.w;
            out[i] = (self.cx + c * bx - s * by, self.cy + s * bx + c * by);
        }
        out
    }

    /// All eight corners, world frame.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.footprint();
        let mut out = [[0.0; 3]; 8];
        for (i, &(x, y)) in fp.iter().enumerate() {
            out[i] = [x, y, 0.0];
            out[i + 4] = [x, y, self.h];
        }
        out
    }
}

/// Slab-method intersection of a normalized ray with the yaw-rotated box:
/// the first positive boundary crossing (entry from outside, exit when the
/// origin is inside), or None on a miss.
pub fn raycast_box(origin: [f64; 3], dir: [f64; 3], b: &Box3) -> Option<f64> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    debug_assert!((norm - 1.0).abs() < 1e-12, "ray direction must be normalized");
    let _ = norm;
    // into box frame: translate, then rotate by -yaw about z
    let (s, c) = b.yaw.sin_cos();
    let ox = origin[0] - b.cx;
    let oy = origin[1] - b.cy;
    let o = [c * ox + s * oy, -s * ox + c * oy, origin[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let lo = [-0.5 * b.l, -0.5 * b.w, 0.0];
    let hi = [0.5 * b.l, 0.5 * b.w, b.h];
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for ax in 0..3 {
        if d[ax].abs() < 1e-15 {
            if o[ax] < lo[ax] || o[ax] > hi[ax] {
                return None;
            }
            continue;
        }
        let t0 = (lo[ax] - o[ax]) / d[ax];
        let t1 = (hi[ax] - o[ax]) / d[ax];
        let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
        if t_enter > t_exit {
            return None;
        }
    }
    if t_enter > 0.0 {
        Some(t_enter)
    } else if t_exit > 0.0 {
        Some(t_exit)
    } else {
        None
    }
}

/// LiDAR simulation parameters: an n_azimuth x n_elevation ray grid from a
/// sensor on the ego z axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarParams {
    pub n_azimuth: usize,
    pub n_elevation: usize,
    pub elevation_range: (f64, f64),
    pub max_range: f64,
    pub dropout: f64,
    pub noise_sigma: f64,
    pub sensor_height: f64,
}

impl Default for LidarParams {
    fn default() -> Self {
        LidarParams {
            n_azimuth: 256,
            n_elevation: 12,
            elevation_range: (-0.42, 0.08),
            max_range: 45.0,
            dropout: 0.08,
            noise_sigma: 0.02,
            sensor_height: 1.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_boxes: (usize, usize),
    pub size_w: (f64, f64),
    pub size_l: (f64, f64),
    pub size_h: (f64, f64),
    pub placement_x: (f64, f64),
    pub placement_y: (f64, f64),
    pub lidar: LidarParams,
    pub camera: CameraModel,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.n_boxes.1 < self.n_boxes.0 {
            return Err(Error::Config("n_boxes range is inverted".into()));
        }
        if self.placement_x.0 <= 0.0 {
            return Err(Error::Config("placement must stay in the camera's front hemisphere (x > 0)".into()));
        }
        if !(0.0..1.0).contains(&self.lidar.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.lidar.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneMeta {
    pub requested: usize,
    pub placed: usize,
}

impl SceneMeta {
    pub fn short_placed(&self) -> bool {
        self.placed < self.requested
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub cloud: PointCloud,
    pub gt: SceneGt,
    pub cam: CameraModel,
    pub boxes: Vec<Box3>,
    pub meta: SceneMeta,
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const GROUND_INTENSITY: f64 = 0.2;

fn azimuth_interval(b: &Box3, margin: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (x, y) in b.footprint() {
        let az = y.atan2(x);
        lo = lo.min(az);
        hi = hi.max(az);
    }
    (lo - margin, hi + margin)
}

fn box_fully_in_image(b: &Box3, cam: &CameraModel) -> bool {
    b.corners().iter().all(|&p| {
        cam.project(p).is_some_and(|(u, v, _)| {
            u >= 1.0 && v >= 1.0 && u < cam.width as f64 - 1.0 && v < cam.height as f64 - 1.0
        })
    })
}

fn intensity_of(albedo: [f64; 3]) -> f64 {
    (0.299 * albedo[0] + 0.587 * albedo[1] + 0.114 * albedo[2]).clamp(0.05, 0.95)
}

/// Samples boxes, casts the LiDAR grid, and renders the camera image.
/// Fully deterministic under the spec seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let requested = rng.gen_range(spec.n_boxes.0..=spec.n_boxes.1);

    let mut boxes: Vec<Box3> = Vec::new();
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < requested && attempts < MAX_PLACEMENT_ATTEMPTS {
        attempts += 1;
        let candidate = Box3 {
            cx: rng.gen_range(spec.placement_x.0..spec.placement_x.1),
            cy: rng.gen_range(spec.placement_y.0..spec.placement_y.1),
            w: rng.gen_range(spec.size_w.0..spec.size_w.1),
            l: rng.gen_range(spec.size_l.0..spec.size_l.1),
            h: rng.gen_range(spec.size_h.0..spec.size_h.1),
            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            albedo: [rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95)],
        };
        // BEV separation by circumscribed circles
        let diag = 0.5 * (candidate.w * candidate.w + candidate.l * candidate.l).sqrt();
        let clear = boxes.iter().all(|b| {
            let other = 0.5 * (b.w * b.w + b.l * b.l).sqrt();
            let d = ((b.cx - candidate.cx).powi(2) + (b.cy - candidate.cy).powi(2)).sqrt();
            d >= diag + other + 0.3
        });
        if !clear {
            continue;
        }
        // disjoint camera azimuth intervals keep every silhouette unoccluded
        let interval = azimuth_interval(&candidate, 0.02);
        if intervals.iter().any(|&(lo, hi)| interval.0 <= hi && lo <= interval.1) {
            continue;
        }
        if !box_fully_in_image(&candidate, &spec.camera) {
            continue;
        }
        intervals.push(interval);
        boxes.push(candidate);
    }
    let meta = SceneMeta { requested, placed: boxes.len() };

    let cloud = cast_lidar(&spec.lidar, &boxes, &mut rng)?;
    let image = render_image(&spec.camera, &boxes);
    let gt = SceneGt { boxes: boxes.iter().map(Box3::gt).collect() };
    Ok(Scene { image, cloud, gt, cam: spec.camera.clone(), boxes, meta })
}

fn cast_lidar(lp: &LidarParams, boxes: &[Box3], rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let noise = Normal::new(0.0, lp.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let origin = [0.0, 0.0, lp.sensor_height];
    let mut points = Vec::new();
    for ai in 0..lp.n_azimuth {
        let az = 2.0 * std::f64::consts::PI * ai as f64 / lp.n_azimuth as f64;
        for ei in 0..lp.n_elevation {
            let f = if lp.n_elevation > 1 { ei as f64 / (lp.n_elevation - 1) as f64 } else { 0.5 };
            let el = lp.elevation_range.0 + f * (lp.elevation_range.1 - lp.elevation_range.0);
            let (saz, caz) = az.sin_cos();
            let (sel, cel) = el.sin_cos();
            let dir = [cel * caz, cel * saz, sel];

            let mut best: Option<(f64, f64)> = None; // (distance, intensity)
            for b in boxes {
                if let Some(t) = raycast_box(origin, dir, b) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, intensity_of(b.albedo)));
                    }
                }
            }
            if dir[2] < 0.0 {
                let t_ground = -origin[2] / dir[2];
                if best.is_none_or(|(bt, _)| t_ground < bt) {
                    best = Some((t_ground, GROUND_INTENSITY));
                }
            }
            let Some((t, intensity)) = best else {
                continue;
            };
            if t > lp.max_range {
                continue;
            }
            if rng.gen::<f64>() < lp.dropout {
                continue;
            }
            let t = t + noise.sample(rng);
            points.push(LidarPoint {
                x: origin[0] + t * dir[0],
                y: origin[1] + t * dir[1],
                z: origin[2] + t * dir[2],
                intensity,
            });
        }
    }
    PointCloud::new(points)
}

/// Flat-shaded silhouettes over a vertical gradient, painter's order by
/// center distance (far to near).
fn render_image(cam: &CameraModel, boxes: &[Box3]) -> Tensor {
    let (h, w) = (cam.height, cam.width);
    let sky = [0.55, 0.65, 0.80];
    let ground = [0.35, 0.30, 0.25];
    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        for c in 0..3 {
            let v = sky[c] * (1.0 - t) + ground[c] * t;
            for x in 0..w {
                img.data_mut()[(c * h + y) * w + x] = v;
            }
        }
    }

    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let da = boxes[a].cx * boxes[a].cx + boxes[a].cy * boxes[a].cy;
        let db = boxes[b].cx * boxes[b].cx + boxes[b].cy * boxes[b].cy;
        db.partial_cmp(&da).unwrap()
    });

    for &bi in &order {
        let b = &boxes[bi];
        let pts: Vec<(f64, f64)> = b
            .corners()
            .iter()
            .filter_map(|&p| cam.project(p).map(|(u, v, _)| (u, v)))
            .collect();
        if pts.len() < 3 {
            continue;
        }
        let hull = convex_hull(&pts);
        let (min_u, max_u) = hull.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, p| (acc.0.min(p.0), acc.1.max(p.0)));
        let (min_v, max_v) = hull.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, p| (acc.0.min(p.1), acc.1.max(p.1)));
        let x0 = min_u.floor().max(0.0) as usize;
        let x1 = (max_u.ceil() as usize).min(w.saturating_sub(1));
        let y0 = min_v.floor().max(0.0) as usize;
        let y1 = (max_v.ceil() as usize).min(h.saturating_sub(1));
        for py in y0..=y1 {
            for px in x0..=x1 {
                if point_in_convex(&hull, (px as f64 + 0.5, py as f64 + 0.5)) {
                    for c in 0..3 {
                        img.data_mut()[(c * h + py) * w + px] = b.albedo[c];
                    }
                }
            }
        }
    }
    img
}

/// Andrew's monotone chain; returns the hull in counterclockwise order.
fn convex_hull(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p = pts.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(p.len() * 2);
    for &pt in p.iter().chain(p.iter().rev().skip(1)) {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], pt) <= 0.0 {
            // halfway through we restart the lower chain; guard against
            // popping below it
            if hull.len() == p.len() {
                break;
            }
            hull.pop();
        }
        hull.push(pt);
    }
    hull.pop();
    hull
}

fn point_in_convex(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    if hull.len() < 3 {
        return false;
    }
    let mut sign = 0.0f64;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

// ---- persistence -------------------------------------------------------

/// Writes image.ppm, cloud.qfpc, cam.txt and gt.csv into `dir` (plus
/// meta.txt when placement came up short).
pub fn save_scene(dir: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_ppm(dir.join("image.ppm"), &scene.image)?;
    scene.cloud.save(dir.join("cloud.qfpc"))?;
    scene.cam.save(dir.join("cam.txt"))?;
    let mut gt = BufWriter::new(File::create(dir.join("gt.csv"))?);
    for b in &scene.gt.boxes {
        writeln!(gt, "{},{},{},{},{}", b.cx, b.cy, b.w, b.l, b.yaw)?;
    }
    gt.flush()?;
    if scene.meta.short_placed() {
        let mut meta = File::create(dir.join("meta.txt"))?;
        writeln!(meta, "requested = {}", scene.meta.requested)?;
        writeln!(meta, "placed = {}", scene.meta.placed)?;
    }
    Ok(())
}

pub fn load_gt(path: impl AsRef<Path>) -> Result<SceneGt> {
    let mut boxes = Vec::new();
    for (ln, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format(format!("gt.csv line {}: bad number `{v}`", ln + 1))))
            .collect::<Result<_>>()?;
        if vals.len() != 5 {
            return Err(Error::Format(format!("gt.csv line {}: expected 5 fields", ln + 1)));
        }
        boxes.push(GtBox { cx: vals[0], cy: vals[1], w: vals[2], l: vals[3], yaw: vals[4] });
    }
    Ok(SceneGt { boxes })
}

/// Binary P6 with 8-bit channels; values are clamped to [0, 1].
pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::shape("save_ppm", image.shape(), "[3, H, W]"));
    };
    if c != 3 {
        return Err(Error::shape("save_ppm", image.shape(), "[3, H, W]"));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.data()[(ch * h + y) * w + x];
                out.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let mut fields = Vec::new();
    // header: magic, width, height, maxval separated by whitespace
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if !header.is_empty() {
                fields.push(String::from_utf8_lossy(&header).to_string());
                header.clear();
            }
        } else {
            header.push(byte[0]);
        }
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PPM header {fields:?}")));
    }
    let w: usize = fields[1].parse().map_err(|_| Error::Format("bad PPM width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Format("bad PPM height".into()))?;
    let mut raw = vec![0u8; 3 * h * w];
    r.read_exact(&mut raw)?;
    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.data_mut()[(c * h + y) * w + x] = raw[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(img)
}

pub fn load_scene_inputs(dir: impl AsRef<Path>) -> Result<(Tensor, PointCloud, SceneGt, CameraModel)> {
    let dir = dir.as_ref();
    Ok((
        load_ppm(dir.join("image.ppm"))?,
        PointCloud::load(dir.join("cloud.qfpc"))?,
        load_gt(dir.join("gt.csv"))?,
        CameraModel::load(dir.join("cam.txt"))?,
    ))
}
