//! Deterministic synthetic scenes: range-image pairs with exact dense flow, lidar
//! flow and foreground/non-occluded masks.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::EvalMasks;
use crate::flow::FlowField;
use crate::lidar::{
    nearest_pixel, project_flow_to_lidar, CameraModel, GridSpec, Point, PointCloud, RangeImage,
    SparseLidarFlow,
};
use crate::network::Network;
use crate::training::TrainSample;

/// Largest flow component the KITTI PNG codec can hold.
const ENCODABLE: f64 = 512.0;
const BG_RANGE: (f64, f64) = (20.0, 78.0);
const OBJ_RANGE: (f64, f64) = (4.0, 15.0);

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub spec: GridSpec,
    pub n_objects: usize,
    /// Bound on each background translation component (px).
    pub bg_max: f64,
    /// Fixed background translation instead of a random one.
    pub background: Option<[f64; 2]>,
    /// Bound on each object translation component (px).
    pub obj_translation_max: f64,
    /// Bound on each entry of an object's linear flow term (px per px).
    pub obj_linear_max: f64,
    pub octaves: usize,
    /// Probability that a lidar cell has no return.
    pub dropout: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(spec: GridSpec, seed: u64) -> Self {
        Self {
            spec,
            n_objects: 2,
            bg_max: 4.0,
            background: None,
            obj_translation_max: 4.0,
            obj_linear_max: 0.02,
            octaves: 3,
            dropout: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.n_objects > 5 {
            return bad(format!("n_objects {} exceeds 5", self.n_objects));
        }
        if self.octaves == 0 {
            return bad("octaves must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        let finite_nonneg = [self.bg_max, self.obj_translation_max, self.obj_linear_max]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite_nonneg {
            return bad("flow bounds must be finite and non-negative".into());
        }
        let bg = match self.background {
            Some([u, v]) if u.is_finite() && v.is_finite() => u.abs().max(v.abs()),
            Some(_) => return bad("background translation must be finite".into()),
            None => self.bg_max,
        };
        let extent = self.spec.width.max(self.spec.height) as f64;
        let worst = bg + self.obj_translation_max + 2.0 * self.obj_linear_max * extent;
        if worst >= ENCODABLE {
            return bad(format!("flow bound {worst} px is not encodable (must stay below 512)"));
        }
        Ok(())
    }

    /// Scene parameters as `key=value` pairs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let s = &self.spec;
        let mut v = vec![
            ("rows", s.rows.to_string()),
            ("cols", s.cols.to_string()),
            ("height", s.height.to_string()),
            ("width", s.width.to_string()),
            ("azimuth_min", s.azimuth.0.to_string()),
            ("azimuth_max", s.azimuth.1.to_string()),
            ("elevation_min", s.elevation.0.to_string()),
            ("elevation_max", s.elevation.1.to_string()),
            ("n_objects", self.n_objects.to_string()),
            ("bg_max", self.bg_max.to_string()),
            ("obj_translation_max", self.obj_translation_max.to_string()),
            ("obj_linear_max", self.obj_linear_max.to_string()),
            ("octaves", self.octaves.to_string()),
            ("dropout", self.dropout.to_string()),
        ];
        if let Some([u, w]) = self.background {
            v.push(("background_u", u.to_string()));
            v.push(("background_v", w.to_string()));
        }
        v.into_iter().map(|(k, x)| (k.to_string(), x)).collect()
    }

    /// Applies `key=value` overrides; unknown keys are an error.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        let s = &mut self.spec;
        match key {
            "rows" => s.rows = num(key, value)?,
            "cols" => s.cols = num(key, value)?,
            "height" => s.height = num(key, value)?,
            "width" => s.width = num(key, value)?,
            "azimuth_min" => s.azimuth.0 = num(key, value)?,
            "azimuth_max" => s.azimuth.1 = num(key, value)?,
            "elevation_min" => s.elevation.0 = num(key, value)?,
            "elevation_max" => s.elevation.1 = num(key, value)?,
            "n_objects" => self.n_objects = num(key, value)?,
            "bg_max" => self.bg_max = num(key, value)?,
            "obj_translation_max" => self.obj_translation_max = num(key, value)?,
            "obj_linear_max" => self.obj_linear_max = num(key, value)?,
            "octaves" => self.octaves = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "background_u" => self.background.get_or_insert([0.0; 2])[0] = num(key, value)?,
            "background_v" => self.background.get_or_insert([0.0; 2])[1] = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown scene key {key:?}"))),
        }
        Ok(())
    }
}

/// Axis-aligned image rectangle carrying the flow `t + A·(p − center)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub translation: [f64; 2],
    pub linear: [[f64; 2]; 2],
    pub range: f64,
    pub reflectivity: f64,
}

impl SceneObject {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }

    pub fn flow_at(&self, y: f64, x: f64) -> [f64; 2] {
        let cx = self.x0 as f64 + (self.w as f64 - 1.0) / 2.0;
        let cy = self.y0 as f64 + (self.h as f64 - 1.0) / 2.0;
        let (dx, dy) = (x - cx, y - cy);
        let a = &self.linear;
        [
            self.translation[0] + a[0][0] * dx + a[0][1] * dy,
            self.translation[1] + a[1][0] * dx + a[1][1] * dy,
        ]
    }
}

/// Sum of seeded plane waves, normalized to [0, 1].
#[derive(Clone, Debug, PartialEq)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, octaves: usize) -> Self {
        let waves = (0..octaves)
            .map(|o| {
                let freq = 3.0 * 2f64.powi(o as i32);
                let dir = rng.random_range(0.0..2.0 * PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                (freq * dir.cos(), freq * dir.sin(), phase, 0.5f64.powi(o as i32))
            })
            .collect();
        Self { waves }
    }

    /// Value at normalized coordinates (a, b) ∈ [0,1]².
    fn at(&self, a: f64, b: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.3).sum();
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fa, fb, ph, amp)| amp * (fa * a + fb * b + ph).sin())
            .sum();
        0.5 + 0.5 * s / total
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub background: [f64; 2],
    /// Later objects are drawn on top.
    pub objects: Vec<SceneObject>,
    range_tex: Texture,
    refl_tex: Texture,
}

impl Scene {
    pub fn random(cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sym = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
        let background = cfg.background.unwrap_or_else(|| [sym(cfg.bg_max), sym(cfg.bg_max)]);
        let (h, w) = (cfg.spec.height, cfg.spec.width);
        let mut objects = Vec::with_capacity(cfg.n_objects);
        for _ in 0..cfg.n_objects {
            let ow = rng.random_range((w / 8).max(1)..=(w / 3).max(1));
            let oh = rng.random_range((h / 6).max(1)..=(h / 2).max(1));
            let x0 = rng.random_range(0..=w - ow);
            let y0 = rng.random_range(0..=h - oh);
            let mut sym = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
            let t = cfg.obj_translation_max;
            let l = cfg.obj_linear_max;
            let translation = [background[0] + sym(t), background[1] + sym(t)];
            let linear = [[sym(l), sym(l)], [sym(l), sym(l)]];
            objects.push(SceneObject {
                x0,
                y0,
                w: ow,
                h: oh,
                translation,
                linear,
                range: rng.random_range(OBJ_RANGE.0..OBJ_RANGE.1),
                reflectivity: rng.random_range(0.2..0.9),
            });
        }
        Ok(Self {
            background,
            objects,
            range_tex: Texture::new(&mut rng, cfg.octaves),
            refl_tex: Texture::new(&mut rng, cfg.octaves),
        })
    }

    /// Index of the topmost object covering pixel (y, x).
    pub fn label(&self, y: usize, x: usize) -> Option<usize> {
        self.objects.iter().rposition(|o| o.contains(y, x))
    }

    pub fn flow_at_pixel(&self, y: usize, x: usize) -> [f64; 2] {
        match self.label(y, x) {
            Some(k) => self.objects[k].flow_at(y as f64, x as f64),
            None => self.background,
        }
    }

    pub fn dense_flow(&self, height: usize, width: usize) -> FlowField {
        FlowField::from_fn(height, width, |y, x| {
            let [u, v] = self.flow_at_pixel(y, x);
            [u as f32, v as f32]
        })
    }

    pub fn fg_mask(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width)
            .map(|i| self.label(i / width, i % width).is_some())
            .collect()
    }

    /// Pixels whose forward-mapped target is not also reached by a different motion.
    pub fn noc_mask(&self, flow: &FlowField) -> Vec<bool> {
        let (h, w) = flow.dims();
        let label = |i: usize| self.label(i / w, i % w).map_or(0, |k| k + 1);
        let target = |i: usize| {
            let [u, v] = flow.get(i / w, i % w);
            nearest_pixel((i % w) as f64 + u as f64, (i / w) as f64 + v as f64, h, w)
                .map(|(y, x)| y * w + x)
        };
        // first label landing on each target, and whether a second one did too
        let mut first: Vec<Option<usize>> = vec![None; h * w];
        let mut conflict = vec![false; h * w];
        for i in 0..h * w {
            if let Some(t) = target(i) {
                match first[t] {
                    None => first[t] = Some(label(i)),
                    Some(l) if l != label(i) => conflict[t] = true,
                    _ => {}
                }
            }
        }
        (0..h * w).map(|i| target(i).is_none_or(|t| !conflict[t])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub scene: Scene,
    pub cloud: PointCloud,
    pub xt: RangeImage,
    pub xt1: RangeImage,
    /// Motion of each lidar cell in grid units (u = columns, v = rows).
    pub grid_flow: FlowField,
    pub gt_dense: FlowField,
    pub gt_lidar: SparseLidarFlow,
    pub masks: EvalMasks,
}

impl SynthSample {
    pub fn to_train_sample(&self, net: &Network) -> Result<TrainSample> {
        TrainSample::new(
            net,
            self.xt.clone(),
            self.xt1.clone(),
            self.gt_dense.clone(),
            self.gt_lidar.clone(),
        )
    }
}

fn lerp((lo, hi): (f64, f64), t: f64) -> f64 {
    lo + (hi - lo) * t
}

/// Inverse bilinear warp: each output cell samples `img` at its position minus its
/// flow. Taps with nonzero weight that fall outside the grid or on invalid cells
/// make the output cell invalid.
pub fn warp_range_image(img: &RangeImage, flow: &FlowField) -> Result<RangeImage> {
    let (rows, cols) = (img.rows(), img.cols());
    if flow.dims() != (rows, cols) {
        return Err(Error::Shape(format!(
            "flow {}x{} vs range image {rows}x{cols}",
            flow.height(),
            flow.width()
        )));
    }
    let mut out = RangeImage::empty(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if !flow.is_valid(r, c) {
                continue;
            }
            let [u, v] = flow.get(r, c);
            let (sy, sx) = (r as f64 - v as f64, c as f64 - u as f64);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let mut acc = (0.0, 0.0);
            let mut ok = true;
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let (y, x) = (y0 + dy, x0 + dx);
                    let cell = (y >= 0.0 && x >= 0.0 && (y as usize) < rows && (x as usize) < cols)
                        .then(|| img.get(y as usize, x as usize))
                        .flatten();
                    match cell {
                        Some((range, refl)) => {
                            acc.0 += wgt * range as f64;
                            acc.1 += wgt * refl as f64;
                        }
                        None => ok = false,
                    }
                }
            }
            if ok {
                out.set(r, c, Some((acc.0 as f32, acc.1 as f32)));
            }
        }
    }
    Ok(out)
}

/// Grid motion of each cell: its center ray is projected, moved by the dense flow at
/// the nearest pixel, and cast back onto the grid. Cells behind the camera stay invalid.
pub fn grid_flow_from_dense(spec: &GridSpec, cam: &CameraModel, dense: &FlowField) -> FlowField {
    let mut out = FlowField::zeros(spec.rows, spec.cols).with_validity(Some(vec![false; spec.cells()])).expect("dims");
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let (az, el) = spec.direction_at(r as f64, c as f64);
            let p = Point::from_polar(1.0, az, el, 0.0);
            let (u, v, depth) = cam.project([p.x as f64, p.y as f64, p.z as f64]);
            if !(depth > 0.0) {
                continue;
            }
            // rays outside the image take the motion of the closest image pixel
            let py = v.round().clamp(0.0, spec.height as f64 - 1.0) as usize;
            let px = u.round().clamp(0.0, spec.width as f64 - 1.0) as usize;
            let [du, dv] = dense.get(py, px);
            // both ends take the same round trip so zero flow stays exactly zero
            let at = |u: f64, v: f64| {
                let q = cam.unproject(u, v, 1.0);
                let q = Point::new(q[0] as f32, q[1] as f32, q[2] as f32, 0.0);
                spec.grid_coords(q.azimuth(), q.elevation())
            };
            let (r0, c0) = at(u, v);
            let (r1, c1) = at(u + du as f64, v + dv as f64);
            out.set(r, c, [(c1 - c0) as f32, (r1 - r0) as f32]);
            out.set_valid(r, c, true);
        }
    }
    out
}

/// First frame: background texture with closer objects where their rectangles project.
fn first_frame(cfg: &SceneConfig, scene: &Scene, cam: &CameraModel, rng: &mut ChaCha8Rng) -> RangeImage {
    let spec = &cfg.spec;
    let mut img = RangeImage::empty(spec.rows, spec.cols);
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let drop = cfg.dropout > 0.0 && rng.random_bool(cfg.dropout);
            if drop {
                continue;
            }
            let (a, b) = ((r as f64 + 0.5) / spec.rows as f64, (c as f64 + 0.5) / spec.cols as f64);
            let (tr, tf) = (scene.range_tex.at(a, b), scene.refl_tex.at(a, b));
            let (az, el) = spec.direction_at(r as f64, c as f64);
            let p = Point::from_polar(1.0, az, el, 0.0);
            let (u, v, _) = cam.project([p.x as f64, p.y as f64, p.z as f64]);
            let obj = nearest_pixel(u, v, spec.height, spec.width)
                .and_then(|(y, x)| scene.label(y, x))
                .map(|k| &scene.objects[k]);
            let (range, refl) = match obj {
                Some(o) => (o.range + 0.5 * (tr - 0.5), o.reflectivity + 0.1 * (tf - 0.5)),
                None => (lerp(BG_RANGE, tr), lerp((0.05, 0.6), tf)),
            };
            img.set(r, c, Some((range as f32, refl.clamp(0.0, 1.0) as f32)));
        }
    }
    img
}

/// Generates one sample; identical configs give bit-identical samples.
pub fn generate_sample(cfg: &SceneConfig) -> Result<SynthSample> {
    let scene = Scene::random(cfg)?;
    let spec = &cfg.spec;
    let cam = CameraModel::fitted(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let xt = first_frame(cfg, &scene, &cam, &mut rng);
    let gt_dense = scene.dense_flow(spec.height, spec.width);
    let grid_flow = grid_flow_from_dense(spec, &cam, &gt_dense);
    let xt1 = warp_range_image(&xt, &grid_flow)?;
    let cloud = xt.to_point_cloud(spec);
    let gt_lidar = project_flow_to_lidar(&cloud, &gt_dense, &cam, spec)?;
    let fg = scene.fg_mask(spec.height, spec.width);
    let noc = scene.noc_mask(&gt_dense);
    let masks = EvalMasks::for_gt(&gt_dense, Some(noc), Some(fg))?;
    Ok(SynthSample {
        scene,
        cloud,
        xt,
        xt1,
        grid_flow,
        gt_dense,
        gt_lidar,
        masks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown split {s:?}")))
    }

    /// Start of the split's seed range; ranges are a million seeds apart.
    fn seed_offset(self) -> u64 {
        self as u64 * 1_000_000
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub split: Split,
    pub seed: u64,
    pub id: String,
}

/// A scene template plus the list of seeds; together they fix the whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub scene: SceneConfig,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// `counts` per split (train, val, test) drawn from disjoint seed ranges.
    pub fn new(scene: SceneConfig, counts: [usize; 3], base_seed: u64) -> Result<Self> {
        if counts.iter().any(|&n| n as u64 >= 1_000_000) {
            return Err(Error::Config("at most 999999 samples per split".into()));
        }
        let mut records = Vec::new();
        for (split, &n) in Split::ALL.iter().zip(&counts) {
            for k in 0..n {
                records.push(ManifestRecord {
                    split: *split,
                    seed: base_seed.wrapping_add(split.seed_offset() + k as u64),
                    id: format!("{}_{k:06}", split.name()),
                });
            }
        }
        Ok(Self { scene, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn scene_for(&self, rec: &ManifestRecord) -> SceneConfig {
        SceneConfig {
            seed: rec.seed,
            ..self.scene.clone()
        }
    }

    pub fn generate(&self, rec: &ManifestRecord) -> Result<SynthSample> {
        generate_sample(&self.scene_for(rec))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.scene.to_pairs() {
            let _ = writeln!(out, "# {k}={v}");
        }
        for r in &self.records {
            let _ = writeln!(out, "{} {} {}", r.split.name(), r.seed, r.id);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut scene = SceneConfig::new(GridSpec::desk(), 0);
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(kv) = line.strip_prefix('#') {
                if let Some((k, v)) = kv.trim().split_once('=') {
                    scene.apply_pair(k.trim(), v)?;
                }
                continue;
            }
            let parts: Vec<_> = line.split_whitespace().collect();
            let [split, seed, id] = parts[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 'split seed id'", n + 1)));
            };
            let seed = seed
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad seed {seed:?}", n + 1)))?;
            records.push(ManifestRecord {
                split: Split::parse(split)?,
                seed,
                id: id.to_string(),
            });
        }
        scene.validate()?;
        Ok(Self { scene, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
