//! Point-cloud products consumed by the model: the plan-view BEV grid and
//! per-camera perspective depth maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const CLOUD_MAGIC: &[u8; 4] = b"QFPC";

/// One LiDAR return in ego meters, intensity in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

/// N >= 0 returns; the empty cloud is the missing-LiDAR degenerate case.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
                return Err(Error::Format(format!("non-finite point at index {i}")));
            }
            if !(0.0..=1.0).contains(&p.intensity) {
                return Err(Error::Format(format!("intensity {} outside [0,1] at index {i}", p.intensity)));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn empty() -> Self {
        PointCloud::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// QFPC: magic, u32 count, then f32 (x, y, z, intensity) quadruples,
    /// all little-endian.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CLOUD_MAGIC)?;
        w.write_all(&(self.points.len() as u32).to_le_bytes())?;
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.intensity] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CLOUD_MAGIC {
            return Err(Error::Format(format!("bad cloud magic {magic:?}")));
        }
        let mut quad = [0u8; 4];
        r.read_exact(&mut quad)?;
        let n = u32::from_le_bytes(quad) as usize;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let mut vals = [0.0f64; 4];
            for v in vals.iter_mut() {
                r.read_exact(&mut quad)?;
                *v = f32::from_le_bytes(quad) as f64;
            }
            points.push(LidarPoint { x: vals[0], y: vals[1], z: vals[2], intensity: vals[3] });
        }
        PointCloud::new(points)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

/// Metric extents and voxel pitch of the BEV grid. Bin counts round up so
/// the outer rim is kept when range/pitch is not integral.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub voxel: (f64, f64, f64),
}

impl VoxelSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if hi <= lo {
                return Err(Error::Config(format!("{name}_range max must exceed min ({lo}..{hi})")));
            }
        }
        let (dx, dy, dz) = self.voxel;
        if dx <= 0.0 || dy <= 0.0 || dz <= 0.0 {
            return Err(Error::Config(format!("voxel extents must be positive, got {:?}", self.voxel)));
        }
        Ok(())
    }

    fn bins(lo: f64, hi: f64, d: f64) -> usize {
        (((hi - lo) / d).ceil() as usize).max(1)
    }

    pub fn bins_x(&self) -> usize {
        Self::bins(self.x_range.0, self.x_range.1, self.voxel.0)
    }

    pub fn bins_y(&self) -> usize {
        Self::bins(self.y_range.0, self.y_range.1, self.voxel.1)
    }

    pub fn bins_z(&self) -> usize {
        Self::bins(self.z_range.0, self.z_range.1, self.voxel.2)
    }

    /// Grid indices for an in-range point; None when out of range on any
    /// axis (ranges are inclusive on both ends, with the exact max boundary
    /// clamped into the last bin).
    pub fn cell_index(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        let index = |v: f64, (lo, hi): (f64, f64), d: f64, bins: usize| -> Option<usize> {
            if v < lo || v > hi {
                return None;
            }
            Some((((v - lo) / d).floor() as usize).min(bins - 1))
        };
        Some((
            index(x, self.x_range, self.voxel.0, self.bins_x())?,
            index(y, self.y_range, self.voxel.1, self.bins_y())?,
            index(z, self.z_range, self.voxel.2, self.bins_z())?,
        ))
    }

    /// Metric center of a BEV cell.
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_range.0 + (ix as f64 + 0.5) * self.voxel.0,
            self.y_range.0 + (iy as f64 + 0.5) * self.voxel.1,
        )
    }
}

/// Plan-view grid with (occupancy count, max z, mean intensity) channels per
/// z slice; a single z slice is the default compression.
#[derive(Debug, Clone)]
pub struct BevMap {
    pub grid: Tensor,
    bins_z: usize,
}

impl BevMap {
    pub fn channels(&self) -> usize {
        3 * self.bins_z
    }

    pub fn occupancy_sum(&self) -> f64 {
        let (bx, by) = (self.grid.shape()[1], self.grid.shape()[2]);
        let mut total = 0.0;
        for zi in 0..self.bins_z {
            let base = 3 * zi * bx * by;
            total += self.grid.data()[base..base + bx * by].iter().sum::<f64>();
        }
        total
    }
}

/// Voxelizes a cloud and compresses along z: out-of-range points are
/// dropped, each occupied cell aggregates count, max z and mean intensity,
/// and empty cells are all-zero.
pub fn voxelize_bev(pc: &PointCloud, spec: &VoxelSpec) -> Result<BevMap> {
    spec.validate()?;
    let (bx, by, bz) = (spec.bins_x(), spec.bins_y(), spec.bins_z());
    let plane = bx * by;
    let mut grid = Tensor::zeros(&[3 * bz, bx, by]);
    let data = grid.data_mut();
    for p in &pc.points {
        let Some((ix, iy, iz)) = spec.cell_index(p.x, p.y, p.z) else {
            continue;
        };
        let cell = ix * by + iy;
        let count_at = (3 * iz) * plane + cell;
        let maxz_at = (3 * iz + 1) * plane + cell;
        let int_at = (3 * iz + 2) * plane + cell;
        if data[count_at] == 0.0 {
            data[maxz_at] = p.z;
        } else {
            data[maxz_at] = data[maxz_at].max(p.z);
        }
        data[count_at] += 1.0;
        data[int_at] += p.intensity; // running sum, normalized below
    }
    for iz in 0..bz {
        for cell in 0..plane {
            let count = data[(3 * iz) * plane + cell];
            if count > 0.0 {
                data[(3 * iz + 2) * plane + cell] /= count;
            }
        }
    }
    Ok(BevMap { grid, bins_z: bz })
}

/// Pinhole camera with a rigid ego-to-camera transform. Camera frame is
/// X right, Y down, Z forward; ego frame is x forward, y left, z up.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 3x4: rotation block and translation, p_cam = R p_ego + t.
    pub extrinsic: [f64; 12],
}

impl CameraModel {
    /// Camera at (0, 0, height_m) looking along ego +x.
    pub fn forward_facing(fx: f64, fy: f64, width: usize, height: usize, height_m: f64) -> Self {
        CameraModel {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            extrinsic: [
                0.0, -1.0, 0.0, 0.0, //
                0.0, 0.0, -1.0, height_m, //
                1.0, 0.0, 0.0, 0.0,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera resolution must be non-zero".into()));
        }
        let e = &self.extrinsic;
        let rows = [[e[0], e[1], e[2]], [e[4], e[5], e[6]], [e[8], e[9], e[10]]];
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| rows[a][k] * rows[b][k]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(Error::Config(format!("extrinsic rotation is not orthonormal (rows {a},{b}: {dot})")));
                }
            }
        }
        let det = rows[0][0] * (rows[1][1] * rows[2][2] - rows[1][2] * rows[2][1])
            - rows[0][1] * (rows[1][0] * rows[2][2] - rows[1][2] * rows[2][0])
            + rows[0][2] * (rows[1][0] * rows[2][1] - rows[1][1] * rows[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("extrinsic rotation determinant {det} != +1")));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        [
            e[0] * p[0] + e[1] * p[1] + e[2] * p[2] + e[3],
            e[4] * p[0] + e[5] * p[1] + e[6] * p[2] + e[7],
            e[8] * p[0] + e[9] * p[1] + e[10] * p[2] + e[11],
        ]
    }

    /// Inverse rigid transform: camera frame back to ego.
    pub fn to_ego(&self, p_cam: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsic;
        let q = [p_cam[0] - e[3], p_cam[1] - e[7], p_cam[2] - e[11]];
        [
            e[0] * q[0] + e[4] * q[1] + e[8] * q[2],
            e[1] * q[0] + e[5] * q[1] + e[9] * q[2],
            e[2] * q[0] + e[6] * q[1] + e[10] * q[2],
        ]
    }

    /// Native-resolution pixel coordinates and camera depth of an ego point,
    /// or None when it sits at or behind the near plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= NEAR_PLANE_M {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// Ego point for a native pixel at the given camera depth.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let x = (u - self.cx) / self.fx * depth;
        let y = (v - self.cy) / self.fy * depth;
        self.to_ego([x, y, depth])
    }

    /// Plain-text serialization, one `key = value` per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "fx = {}", self.fx)?;
        writeln!(w, "fy = {}", self.fy)?;
        writeln!(w, "cx = {}", self.cx)?;
        writeln!(w, "cy = {}", self.cy)?;
        writeln!(w, "width = {}", self.width)?;
        writeln!(w, "height = {}", self.height)?;
        let ext: Vec<String> = self.extrinsic.iter().map(f64::to_string).collect();
        writeln!(w, "extrinsic = {}", ext.join(" "))?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cam = CameraModel {
            fx: 0.0,
            fy: 0.0,
            cx: 0.0,
            cy: 0.0,
            width: 0,
            height: 0,
            extrinsic: [0.0; 12],
        };
        let mut saw_extrinsic = false;
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("camera file line `{line}` is not key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            let parse = |v: &str| -> Result<f64> {
                v.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{v}` for key `{key}`")))
            };
            match key {
                "fx" => cam.fx = parse(value)?,
                "fy" => cam.fy = parse(value)?,
                "cx" => cam.cx = parse(value)?,
                "cy" => cam.cy = parse(value)?,
                "width" => cam.width = parse(value)? as usize,
                "height" => cam.height = parse(value)? as usize,
                "extrinsic" => {
                    let vals: Vec<&str> = value.split_whitespace().collect();
                    if vals.len() != 12 {
                        return Err(Error::Format(format!("extrinsic needs 12 entries, got {}", vals.len())));
                    }
                    for (slot, v) in cam.extrinsic.iter_mut().zip(vals) {
                        *slot = parse(v)?;
                    }
                    saw_extrinsic = true;
                }
                other => return Err(Error::Format(format!("unknown camera key `{other}`"))),
            }
        }
        if !saw_extrinsic {
            return Err(Error::Format("camera file missing extrinsic".into()));
        }
        cam.validate()?;
        Ok(cam)
    }
}

/// Points closer than this along the camera axis are discarded before the
/// perspective divide.
pub const NEAR_PLANE_M: f64 = 0.1;

/// Sparse depth raster: 0 marks no return, positive values are camera-frame
/// metric depth.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub depth: Tensor,
}

impl DepthMap {
    pub fn zeros(h: usize, w: usize) -> Self {
        DepthMap { depth: Tensor::zeros(&[1, h, w]) }
    }

    pub fn h(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.depth.shape()[2]
    }

    /// 16-bit PGM with millimeter quantization, for eyeballing.
    pub fn save_pgm16(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = (self.h(), self.w());
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "P5\n{w} {h}\n65535\n")?;
        for &d in self.depth.data() {
            let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
            out.write_all(&mm.to_be_bytes())?; // PGM samples are big-endian
        }
        out.flush()?;
        Ok(())
    }
}

/// Rasterizes a cloud into a sparse depth map: nearest-return z-buffering at
/// the target resolution, which is scaled from the camera's native pixels.
/// Points beyond `max_depth` are dropped.
pub fn project_depth(pc: &PointCloud, cam: &CameraModel, out_h: usize, out_w: usize, max_depth: f64) -> Result<DepthMap> {
    cam.validate()?;
    let mut map = DepthMap::zeros(out_h, out_w);
    let data = map.depth.data_mut();
    let sx = out_w as f64 / cam.width as f64;
    let sy = out_h as f64 / cam.height as f64;
    for p in &pc.points {
        let Some((u, v, z)) = cam.project([p.x, p.y, p.z]) else {
            continue;
        };
        if z > max_depth {
            continue;
        }
        let px = (u * sx).round();
        let py = (v * sy).round();
        if px < 0.0 || py < 0.0 || px >= out_w as f64 || py >= out_h as f64 {
            continue;
        }
        let at = py as usize * out_w + px as usize;
        if data[at] == 0.0 || z < data[at] {
            data[at] = z;
        }
    }
    Ok(map)
}

/// Block-average downsampling of a BEV grid onto (oh, ow) cells, partitioned
/// at floor(i*H/OH) boundaries. Averaging (rather than point sampling) keeps
/// sparse occupancy visible at the coarser resolution.
pub fn downsample_bev(grid: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let [c, h, w] = *grid.shape() else {
        return Err(Error::shape("downsample_bev", grid.shape(), "[C, H, W]"));
    };
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(Error::shape("downsample_bev", [h, w], [oh, ow]));
    }
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let bound = |i: usize, n: usize, on: usize| i * n / on;
    for ch in 0..c {
        let src = &grid.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = (bound(oy, h, oh), bound(oy + 1, h, oh));
            for ox in 0..ow {
                let (x0, x1) = (bound(ox, w, ow), bound(ox + 1, w, ow));
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += src[y * w + x];
                    }
                }
                out.data_mut()[(ch * oh + oy) * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Ok(out)
}

/// All-zero LiDAR products of the correct shapes: the missing-LiDAR inputs.
pub fn zero_lidar(spec: &VoxelSpec, depth_sizes: &[(usize, usize)]) -> Result<(BevMap, Vec<DepthMap>)> {
    spec.validate()?;
    let grid = Tensor::zeros(&[3 * spec.bins_z(), spec.bins_x(), spec.bins_y()]);
    let maps = depth_sizes.iter().map(|&(h, w)| DepthMap::zeros(h, w)).collect();
    Ok((BevMap { grid, bins_z: spec.bins_z() }, maps))
}
