//! Lidar scans to range images, and dense image flow to sparse lidar flow.
//!
//! Coordinates follow the sensor convention: x forward, y left, z up (meters).
//! Azimuth is `atan2(y, x)` (positive to the left), elevation is
//! `atan2(z, hypot(x, y))`. Range-image row 0 is the top elevation bin and
//! column 0 the rightmost azimuth bin.

use std::fs;
use std::path::Path;

use lidarflow_tensor::{Mask, Real, Tensor};

use crate::error::{Error, Result};
use crate::flow::FlowField;

/// Lidar grid and camera image geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    /// Range-image rows N.
    pub rows: usize,
    /// Range-image columns M.
    pub cols: usize,
    /// Image height H.
    pub height: usize,
    /// Image width W.
    pub width: usize,
    /// Horizontal field of view (φ_min, φ_max) in radians.
    pub azimuth: (f64, f64),
    /// Vertical field of view (θ_min, θ_max) in radians.
    pub elevation: (f64, f64),
}

impl GridSpec {
    pub const DEFAULT_AZIMUTH_DEG: (f64, f64) = (-45.0, 45.0);
    /// Vertical spread of a 64-beam spinning sensor.
    pub const DEFAULT_ELEVATION_DEG: (f64, f64) = (-24.8, 2.0);

    pub fn new(rows: usize, cols: usize, height: usize, width: usize) -> Self {
        let (a0, a1) = Self::DEFAULT_AZIMUTH_DEG;
        let (e0, e1) = Self::DEFAULT_ELEVATION_DEG;
        Self {
            rows,
            cols,
            height,
            width,
            azimuth: (a0.to_radians(), a1.to_radians()),
            elevation: (e0.to_radians(), e1.to_radians()),
        }
    }

    /// 64×384 lidar grid, 256×1224 image.
    pub fn paper() -> Self {
        Self::new(64, 384, 256, 1224)
    }

    /// 32×64 lidar grid, 64×128 image.
    pub fn desk() -> Self {
        Self::new(32, 64, 64, 128)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rows == 0 || self.cols == 0 || self.height == 0 || self.width == 0 {
            return bad(format!("grid dims must be positive: {self:?}"));
        }
        if self.rows % 32 != 0 || self.cols % 32 != 0 {
            return bad(format!(
                "lidar grid {}x{} must be divisible by 32",
                self.rows, self.cols
            ));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!(
                "image {}x{} must be divisible by 8",
                self.height, self.width
            ));
        }
        let (a0, a1) = self.azimuth;
        let (e0, e1) = self.elevation;
        if !(a0 < a1) || !(e0 < e1) || a0 <= -std::f64::consts::PI || a1 > std::f64::consts::PI {
            return bad("field of view bounds must be increasing".into());
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Continuous grid coordinates (row, col) of a direction; cell centers sit at
    /// half-integers of the binning formula, i.e. at integer results here.
    pub fn grid_coords(&self, azimuth: f64, elevation: f64) -> (f64, f64) {
        let (a0, a1) = self.azimuth;
        let (e0, e1) = self.elevation;
        let row = self.rows as f64 * (e1 - elevation) / (e1 - e0) - 0.5;
        let col = self.cols as f64 * (azimuth - a0) / (a1 - a0) - 0.5;
        (row, col)
    }

    /// Direction (azimuth, elevation) at continuous grid coordinates.
    pub fn direction_at(&self, row: f64, col: f64) -> (f64, f64) {
        let (a0, a1) = self.azimuth;
        let (e0, e1) = self.elevation;
        let azimuth = a0 + (col + 0.5) * (a1 - a0) / self.cols as f64;
        let elevation = e1 - (row + 0.5) * (e1 - e0) / self.rows as f64;
        (azimuth, elevation)
    }

    fn in_fov(&self, azimuth: f64, elevation: f64) -> bool {
        azimuth >= self.azimuth.0
            && azimuth <= self.azimuth.1
            && elevation >= self.elevation.0
            && elevation <= self.elevation.1
    }

    /// Range-image cell of a point, `None` outside the field of view.
    pub fn cell_of(&self, p: &Point) -> Option<(usize, usize)> {
        let (az, el) = (p.azimuth(), p.elevation());
        if !self.in_fov(az, el) {
            return None;
        }
        let (a0, a1) = self.azimuth;
        let (e0, e1) = self.elevation;
        let row = (self.rows as f64 * (e1 - el) / (e1 - e0)).floor();
        let col = (self.cols as f64 * (az - a0) / (a1 - a0)).floor();
        let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        Some((clamp(row, self.rows), clamp(col, self.cols)))
    }
}

/// One lidar return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub reflectivity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, reflectivity: f32) -> Self {
        Self {
            x,
            y,
            z,
            reflectivity,
        }
    }

    /// Point at `range` along the given direction.
    pub fn from_polar(range: f64, azimuth: f64, elevation: f64, reflectivity: f32) -> Self {
        let (ce, se) = (elevation.cos(), elevation.sin());
        Self::new(
            (range * ce * azimuth.cos()) as f32,
            (range * ce * azimuth.sin()) as f32,
            (range * se) as f32,
            reflectivity,
        )
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    pub fn azimuth(&self) -> f64 {
        (self.y as f64).atan2(self.x as f64)
    }

    pub fn elevation(&self) -> f64 {
        (self.z as f64).atan2((self.x as f64).hypot(self.y as f64))
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.reflectivity.is_finite()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mirror about the x-z plane (y → −y).
    pub fn mirrored(&self) -> Self {
        Self::new(
            self.points
                .iter()
                .map(|p| Point::new(p.x, -p.y, p.z, p.reflectivity))
                .collect(),
        )
    }
}

const SCAN_RECORD: usize = 16;

/// Parses a headerless scan of little-endian f32 quadruples (x, y, z, reflectance).
pub fn decode_scan(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % SCAN_RECORD != 0 {
        let offset = bytes.len() - bytes.len() % SCAN_RECORD;
        return Err(Error::Format(format!(
            "scan truncated: partial record at byte offset {offset} ({} trailing bytes)",
            bytes.len() - offset
        )));
    }
    let f = |c: &[u8], i: usize| f32::from_le_bytes([c[4 * i], c[4 * i + 1], c[4 * i + 2], c[4 * i + 3]]);
    let mut points = Vec::with_capacity(bytes.len() / SCAN_RECORD);
    for (k, c) in bytes.chunks_exact(SCAN_RECORD).enumerate() {
        let p = Point::new(f(c, 0), f(c, 1), f(c, 2), f(c, 3));
        if !p.is_finite() {
            return Err(Error::Format(format!(
                "non-finite point at byte offset {}",
                k * SCAN_RECORD
            )));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn encode_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * SCAN_RECORD);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.reflectivity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scan(cloud)).map_err(|e| Error::io(path, e))
}

/// Keeps the points inside the horizontal and vertical field of view, in order.
pub fn crop_fov(cloud: &PointCloud, spec: &GridSpec) -> PointCloud {
    PointCloud::new(
        cloud
            .points
            .iter()
            .filter(|p| spec.in_fov(p.azimuth(), p.elevation()))
            .copied()
            .collect(),
    )
}

/// Index of the nearest in-FOV point per cell (row-major), `None` for empty cells.
pub fn bin_points(cloud: &PointCloud, spec: &GridSpec) -> Vec<Option<usize>> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; spec.cells()];
    for (i, p) in cloud.points.iter().enumerate() {
        let r = p.range();
        if !(r > 0.0) {
            continue;
        }
        let Some((row, col)) = spec.cell_of(p) else {
            continue;
        };
        let slot = &mut best[row * spec.cols + col];
        if slot.is_none_or(|(_, br)| r < br) {
            *slot = Some((i, r));
        }
    }
    best.into_iter().map(|b| b.map(|(i, _)| i)).collect()
}

/// Per-channel affine map applied to valid cells before they enter the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputNorm {
    pub range: (f64, f64),
    pub reflectivity: (f64, f64),
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            range: (1.0, 0.0),
            reflectivity: (1.0, 0.0),
        }
    }
}

/// N×M grid of (range, reflectivity) with per-cell validity. Invalid cells hold 0 in
/// both channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    rows: usize,
    cols: usize,
    range: Vec<f32>,
    reflectivity: Vec<f32>,
    valid: Vec<bool>,
}

impl RangeImage {
    pub fn empty(rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            range: vec![0.0; n],
            reflectivity: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn from_parts(
        rows: usize,
        cols: usize,
        range: Vec<f32>,
        reflectivity: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = rows * cols;
        if range.len() != n || reflectivity.len() != n || valid.len() != n {
            return Err(Error::Shape(format!("range image {rows}x{cols} arrays differ in length")));
        }
        for i in 0..n {
            let ok = if valid[i] {
                range[i] > 0.0 && range[i].is_finite() && reflectivity[i].is_finite()
            } else {
                range[i] == 0.0 && reflectivity[i] == 0.0
            };
            if !ok {
                return Err(Error::Format(format!(
                    "range image cell {} violates the validity sentinel rule",
                    i
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            range,
            reflectivity,
            valid,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn range(&self) -> &[f32] {
        &self.range
    }

    pub fn reflectivity(&self) -> &[f32] {
        &self.reflectivity
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<(f32, f32)> {
        let i = row * self.cols + col;
        self.valid[i].then(|| (self.range[i], self.reflectivity[i]))
    }

    /// Stores a return; a non-positive range clears the cell instead.
    pub fn set(&mut self, row: usize, col: usize, cell: Option<(f32, f32)>) {
        let i = row * self.cols + col;
        match cell {
            Some((r, refl)) if r > 0.0 => {
                self.range[i] = r;
                self.reflectivity[i] = refl;
                self.valid[i] = true;
            }
            _ => {
                self.range[i] = 0.0;
                self.reflectivity[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn mask(&self) -> Mask {
        Mask::from_vec(1, self.rows, self.cols, self.valid.clone()).expect("mask dims")
    }

    /// 1×2×N×M network input with `norm` applied to valid cells.
    pub fn to_tensor<T: Real>(&self, norm: &InputNorm) -> Tensor<T> {
        Tensor::from_fn([1, 2, self.rows, self.cols], |[_, c, y, x]| {
            let i = y * self.cols + x;
            if !self.valid[i] {
                return T::zero();
            }
            let (v, (s, o)) = if c == 0 {
                (self.range[i], norm.range)
            } else {
                (self.reflectivity[i], norm.reflectivity)
            };
            T::of(v as f64 * s + o)
        })
    }

    /// Column-wise mirror (column c ↔ M−1−c).
    pub fn mirrored(&self) -> Self {
        let flip = |v: &[f32]| -> Vec<f32> {
            v.chunks_exact(self.cols)
                .flat_map(|r| r.iter().rev().copied())
                .collect()
        };
        Self {
            rows: self.rows,
            cols: self.cols,
            range: flip(&self.range),
            reflectivity: flip(&self.reflectivity),
            valid: self
                .valid
                .chunks_exact(self.cols)
                .flat_map(|r| r.iter().rev().copied())
                .collect(),
        }
    }

    /// One point per valid cell, placed along the cell-center direction.
    pub fn to_point_cloud(&self, spec: &GridSpec) -> PointCloud {
        let mut pts = Vec::with_capacity(self.valid_count());
        for r in 0..self.rows {
            for c in 0..self.cols {
                if let Some((range, refl)) = self.get(r, c) {
                    let (az, el) = spec.direction_at(r as f64, c as f64);
                    pts.push(Point::from_polar(range as f64, az, el, refl));
                }
            }
        }
        PointCloud::new(pts)
    }
}

/// Bins a cloud into an N×M range image; the nearest return wins each cell.
pub fn project_to_range_image(cloud: &PointCloud, spec: &GridSpec) -> RangeImage {
    let mut img = RangeImage::empty(spec.rows, spec.cols);
    for (i, winner) in bin_points(cloud, spec).into_iter().enumerate() {
        if let Some(k) = winner {
            let p = &cloud.points[k];
            img.set(
                i / spec.cols,
                i % spec.cols,
                Some((p.range() as f32, p.reflectivity)),
            );
        }
    }
    img
}

const LRI_MAGIC: &[u8; 4] = b"LRI1";

pub fn encode_lri(img: &RangeImage) -> Vec<u8> {
    let n = img.rows * img.cols;
    let mut out = Vec::with_capacity(12 + 9 * n);
    out.extend_from_slice(LRI_MAGIC);
    out.extend_from_slice(&(img.rows as u32).to_le_bytes());
    out.extend_from_slice(&(img.cols as u32).to_le_bytes());
    for v in img.range.iter().chain(&img.reflectivity) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(img.valid.iter().map(|v| *v as u8));
    out
}

pub fn decode_lri(bytes: &[u8]) -> Result<RangeImage> {
    if bytes.len() < 12 || &bytes[..4] != LRI_MAGIC {
        return Err(Error::Format("missing LRI1 magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let n = rows * cols;
    if bytes.len() != 12 + 9 * n {
        return Err(Error::Format(format!(
            "LRI1 {rows}x{cols} expects {} bytes, got {}",
            12 + 9 * n,
            bytes.len()
        )));
    }
    let floats = |off: usize| -> Vec<f32> {
        bytes[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    let range = floats(12);
    let refl = floats(12 + 4 * n);
    let mut valid = Vec::with_capacity(n);
    for (i, b) in bytes[12 + 8 * n..].iter().enumerate() {
        match b {
            0 => valid.push(false),
            1 => valid.push(true),
            other => {
                return Err(Error::Format(format!(
                    "LRI1 validity byte {other} at cell {i}"
                )))
            }
        }
    }
    RangeImage::from_parts(rows, cols, range, refl, valid)
}

pub fn write_lri(path: impl AsRef<Path>, img: &RangeImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_lri(img)).map_err(|e| Error::io(path, e))
}

pub fn read_lri(path: impl AsRef<Path>) -> Result<RangeImage> {
    let path = path.as_ref();
    decode_lri(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Pinhole intrinsics plus a rigid lidar-to-camera transform. Camera axes:
/// x right, y down, z forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

/// Rotation taking sensor axes (forward, left, up) to camera axes (right, down, forward).
pub const LIDAR_TO_CAMERA_AXES: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::Config("rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("rotation determinant {det} is not +1")));
        }
        Ok(())
    }

    /// Camera co-located with the lidar whose image spans exactly the grid's field of
    /// view: the outer pixel edges sit on the FOV bounds.
    pub fn fitted(spec: &GridSpec) -> Self {
        let (a0, a1) = spec.azimuth;
        let (e0, e1) = spec.elevation;
        let fx = spec.width as f64 / (a1.tan() - a0.tan());
        let fy = spec.height as f64 / (e1.tan() - e0.tan());
        Self {
            fx,
            fy,
            cx: fx * a1.tan() - 0.5,
            cy: fy * e1.tan() - 0.5,
            rotation: LIDAR_TO_CAMERA_AXES,
            translation: [0.0; 3],
        }
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| {
            r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i]
        })
    }

    pub fn to_lidar(&self, c: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [
            c[0] - self.translation[0],
            c[1] - self.translation[1],
            c[2] - self.translation[2],
        ];
        std::array::from_fn(|i| r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2])
    }

    /// (u, v, depth) of a sensor-frame point. Depth ≤ 0 means behind the camera and
    /// the pixel coordinates are then meaningless.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let [x, y, z] = self.to_camera(p);
        (self.fx * x / z + self.cx, self.fy * y / z + self.cy, z)
    }

    /// Sensor-frame point seen at pixel (u, v) with the given depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let x = (u - self.cx) / self.fx * depth;
        let y = (v - self.cy) / self.fy * depth;
        self.to_lidar([x, y, depth])
    }
}

/// Nearest pixel of a projection, if it lies inside an image of `height×width`.
pub fn nearest_pixel(u: f64, v: f64, height: usize, width: usize) -> Option<(usize, usize)> {
    let (x, y) = (u.round(), v.round());
    (x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height)
        .then_some((y as usize, x as usize))
}

/// Image-pixel flow on the lidar grid; valid only where a return projects into the image.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLidarFlow {
    flow: FlowField,
}

impl SparseLidarFlow {
    pub fn new(flow: FlowField) -> Self {
        let valid = flow.valid_vec();
        Self {
            flow: flow.with_validity(Some(valid)).expect("same dims"),
        }
    }

    pub fn flow(&self) -> &FlowField {
        &self.flow
    }

    pub fn into_flow(self) -> FlowField {
        self.flow
    }

    pub fn valid_count(&self) -> usize {
        self.flow.valid_vec().iter().filter(|v| **v).count()
    }

    pub fn mirrored(&self) -> Self {
        Self {
            flow: self.flow.mirrored(),
        }
    }
}

/// Samples dense image flow at the pixel each range-image return projects to.
pub fn project_flow_to_lidar(
    cloud: &PointCloud,
    dense: &FlowField,
    cam: &CameraModel,
    spec: &GridSpec,
) -> Result<SparseLidarFlow> {
    if dense.dims() != (spec.height, spec.width) {
        return Err(Error::Shape(format!(
            "dense flow is {}x{}, grid expects {}x{}",
            dense.height(),
            dense.width(),
            spec.height,
            spec.width
        )));
    }
    let mut out = FlowField::zeros(spec.rows, spec.cols)
        .with_validity(Some(vec![false; spec.cells()]))?;
    for (i, winner) in bin_points(cloud, spec).into_iter().enumerate() {
        let Some(k) = winner else { continue };
        let p = &cloud.points[k];
        let (u, v, depth) = cam.project([p.x as f64, p.y as f64, p.z as f64]);
        if !(depth > 0.0) {
            continue;
        }
        let Some((py, px)) = nearest_pixel(u, v, spec.height, spec.width) else {
            continue;
        };
        if !dense.is_valid(py, px) {
            continue;
        }
        let (r, c) = (i / spec.cols, i % spec.cols);
        out.set(r, c, dense.get(py, px));
        out.set_valid(r, c, true);
    }
    Ok(SparseLidarFlow::new(out))
}
