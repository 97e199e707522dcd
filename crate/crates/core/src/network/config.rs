use lidarflow_tensor::{Padding, LEAKY_SLOPE};

use crate::error::{Error, Result};
use crate::lidar::GridSpec;

/// Every architectural dimension of the three blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub spec: GridSpec,
    pub base_channels: usize,
    pub contraction_levels: usize,
    /// Two-branch stages of the domain transform.
    pub dt_stages: usize,
    /// Stride-2 upscaling stages after the two-branch stages.
    pub dt_upscale_stages: usize,
    pub refine_iters: usize,
    /// Kernel (height, width) of the narrow branch.
    pub narrow_kernel: (usize, usize),
    pub narrow_layers: usize,
    pub wide_kernel: (usize, usize),
    pub refine_convs_per_iter: usize,
    pub leaky_slope: f64,
}

/// Contraction kernel sizes, FlowNetSimple style; deeper levels reuse 3.
const CONTRACTION_KERNELS: [usize; 5] = [7, 5, 5, 3, 3];

impl NetworkConfig {
    pub fn new(spec: GridSpec, base_channels: usize) -> Self {
        Self {
            spec,
            base_channels,
            contraction_levels: 5,
            dt_stages: 3,
            dt_upscale_stages: 2,
            refine_iters: 5,
            narrow_kernel: (3, 5),
            narrow_layers: 5,
            wide_kernel: (3, 25),
            refine_convs_per_iter: 2,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    pub fn paper() -> Self {
        Self::new(GridSpec::paper(), 64)
    }

    pub fn desk() -> Self {
        Self::new(GridSpec::desk(), 16)
    }

    /// Kernel size of contraction level `l` (1-based).
    pub fn contraction_kernel(&self, l: usize) -> usize {
        CONTRACTION_KERNELS.get(l - 1).copied().unwrap_or(3)
    }

    /// Output channels of contraction level `l` (1-based): base·{1,2,4,8,8,…}.
    pub fn contraction_channels(&self, l: usize) -> usize {
        self.base_channels << (l - 1).min(3)
    }

    /// Number of loss sites: one per lidar level, upscaling stage and refinement iteration.
    pub fn site_count(&self) -> usize {
        self.contraction_levels + self.dt_upscale_stages + self.refine_iters
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        if s.rows == 0 || s.cols == 0 || s.height == 0 || s.width == 0 {
            return Err(Error::Config("grid dims must be positive".into()));
        }
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.contraction_levels == 0
            || self.dt_stages == 0
            || self.dt_upscale_stages == 0
            || self.refine_iters == 0
        {
            return bad("stage counts must be positive".into());
        }
        if self.narrow_layers == 0 || self.refine_convs_per_iter == 0 {
            return bad("layer counts must be positive".into());
        }
        let odd = |k: (usize, usize)| k.0 % 2 == 1 && k.1 % 2 == 1;
        if !odd(self.narrow_kernel) || !odd(self.wide_kernel) {
            return bad("branch kernels must have odd sizes".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside (0,1)", self.leaky_slope));
        }
        let f = 1usize << self.contraction_levels;
        if s.rows % f != 0 || s.cols % f != 0 {
            return Err(Error::Geometry(format!(
                "lidar grid {}x{} not divisible by 2^{}",
                s.rows, s.cols, self.contraction_levels
            )));
        }
        let g = 2usize << self.dt_upscale_stages;
        if s.height % g != 0 || s.width % g != 0 {
            return Err(Error::Geometry(format!(
                "image {}x{} not divisible by {g}",
                s.height, s.width
            )));
        }
        Ok(())
    }
}

/// Monotone integer schedule of `stages` sizes from `w_in` (exclusive) to `w_out`
/// (inclusive), linearly interpolated and rounded half up.
pub fn width_schedule(w_in: usize, w_out: usize, stages: usize) -> Vec<usize> {
    let s = stages as i64;
    let (a, b) = (w_in as i64, w_out as i64);
    (1..=s)
        .map(|k| {
            let num = a * s + (b - a) * k;
            (2 * num + s).div_euclid(2 * s) as usize
        })
        .collect()
}

/// Padding of one two-branch stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DtStage {
    pub input: (usize, usize),
    pub output: (usize, usize),
    /// One entry per narrow-branch layer.
    pub narrow_pads: Vec<Padding>,
    /// Central crop (top, left, height, width) applied before the wide conv when its
    /// kernel alone would overshoot the target size.
    pub wide_crop: Option<(usize, usize, usize, usize)>,
    pub wide_pad: Padding,
}

/// Spatial sizes at every stage, resolved once from a [`NetworkConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    /// (h, w) after contraction level l = 1..=L.
    pub lidar_levels: Vec<(usize, usize)>,
    pub dt_stages: Vec<DtStage>,
    /// (h, w) after each upscaling stage.
    pub up_dims: Vec<(usize, usize)>,
    pub image: (usize, usize),
}

/// Splits a total pad over `layers` layers, then each layer's share before/after.
fn spread(total: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|j| {
            let p = total / layers + usize::from(j < total % layers);
            (p / 2, p - p / 2)
        })
        .collect()
}

impl Geometry {
    pub fn resolve(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.spec;
        let lidar_levels = (1..=cfg.contraction_levels)
            .map(|l| (s.rows >> l, s.cols >> l))
            .collect::<Vec<_>>();
        let start = lidar_levels[0];
        let down = 1usize << (cfg.dt_upscale_stages + 1);
        let target = (s.height / down, s.width / down);
        let hs = width_schedule(start.0, target.0, cfg.dt_stages);
        let ws = width_schedule(start.1, target.1, cfg.dt_stages);
        let mut dt_stages = Vec::with_capacity(cfg.dt_stages);
        let mut cur = start;
        for (&h, &w) in hs.iter().zip(&ws) {
            dt_stages.push(Self::dt_stage(cfg, cur, (h, w))?);
            cur = (h, w);
        }
        let up_dims = (1..=cfg.dt_upscale_stages)
            .map(|i| (target.0 << i, target.1 << i))
            .collect();
        Ok(Self {
            lidar_levels,
            dt_stages,
            up_dims,
            image: (s.height, s.width),
        })
    }

    fn dt_stage(cfg: &NetworkConfig, input: (usize, usize), output: (usize, usize)) -> Result<DtStage> {
        let n = cfg.narrow_layers;
        let (kh, kw) = cfg.narrow_kernel;
        let need = |inp: usize, out: usize, shrink: usize, axis: &str| -> Result<usize> {
            let p = out as i64 - inp as i64 + shrink as i64;
            if p < 0 {
                return Err(Error::Geometry(format!(
                    "narrow branch cannot reach {axis} {out} from {inp}: shrinks by {shrink}"
                )));
            }
            Ok(p as usize)
        };
        let pv = spread(need(input.0, output.0, n * (kh - 1), "height")?, n);
        let ph = spread(need(input.1, output.1, n * (kw - 1), "width")?, n);
        let mut cur = input;
        let mut narrow_pads = Vec::with_capacity(n);
        for (&(t, b), &(l, r)) in pv.iter().zip(&ph) {
            let h = (cur.0 + t + b) as i64 - (kh as i64 - 1);
            let w = (cur.1 + l + r) as i64 - (kw as i64 - 1);
            if h < 1 || w < 1 {
                return Err(Error::Geometry(format!(
                    "narrow branch intermediate size {h}x{w} from {cur:?}"
                )));
            }
            cur = (h as usize, w as usize);
            narrow_pads.push(Padding::new(t, b, l, r));
        }
        let (wh, ww) = cfg.wide_kernel;
        let deficit = |inp: usize, out: usize, k: usize| out as i64 - inp as i64 + (k as i64 - 1);
        let (dv, dh) = (deficit(input.0, output.0, wh), deficit(input.1, output.1, ww));
        let (crop_v, crop_h) = ((-dv).max(0) as usize, (-dh).max(0) as usize);
        let wide_crop = (crop_v > 0 || crop_h > 0).then(|| {
            (
                crop_v / 2,
                crop_h / 2,
                input.0 - crop_v,
                input.1 - crop_h,
            )
        });
        if crop_v >= input.0 || crop_h >= input.1 {
            return Err(Error::Geometry(format!(
                "wide branch cannot map {input:?} to {output:?}"
            )));
        }
        let (t, b) = spread(dv.max(0) as usize, 1)[0];
        let (l, r) = spread(dh.max(0) as usize, 1)[0];
        Ok(DtStage {
            input,
            output,
            narrow_pads,
            wide_crop,
            wide_pad: Padding::new(t, b, l, r),
        })
    }

    /// (h, w) of sub-block A's output.
    pub fn dt_output(&self) -> (usize, usize) {
        self.dt_stages.last().expect("at least one stage").output
    }

    /// (h, w) of the refinement stage.
    pub fn refine_dims(&self) -> (usize, usize) {
        *self.up_dims.last().unwrap_or(&self.dt_output())
    }
}

/// Closed-form shapes of every block output, (h, w, channels).
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeReport {
    /// Coarse to fine.
    pub lidar_preds: Vec<(usize, usize, usize)>,
    pub y_lidar: (usize, usize, usize),
    pub sub_block_a: (usize, usize, usize),
    pub up_preds: Vec<(usize, usize, usize)>,
    pub y_up: (usize, usize, usize),
    pub refine_preds: Vec<(usize, usize, usize)>,
    pub y_end: (usize, usize, usize),
    pub final_flow: (usize, usize, usize),
    pub sites: usize,
}

impl ShapeReport {
    pub fn new(cfg: &NetworkConfig, geom: &Geometry) -> Self {
        let f = |(h, w): (usize, usize)| (h, w, 2);
        let lidar_preds: Vec<_> = geom.lidar_levels.iter().rev().map(|&d| f(d)).collect();
        let up_preds: Vec<_> = geom.up_dims.iter().map(|&d| f(d)).collect();
        let r = f(geom.refine_dims());
        let (h, w) = geom.dt_output();
        let y_up = *up_preds.last().unwrap_or(&r);
        Self {
            y_lidar: *lidar_preds.last().expect("levels"),
            lidar_preds,
            sub_block_a: (h, w, 2 * cfg.base_channels),
            up_preds,
            y_up,
            refine_preds: vec![r; cfg.refine_iters],
            y_end: r,
            final_flow: (r.0 * 2, r.1 * 2, 2),
            sites: cfg.site_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(width_schedule(192, 153, 3), vec![179, 166, 153]);
        assert_eq!(width_schedule(100, 100, 3), vec![100, 100, 100]);
        let s = width_schedule(10, 25, 4);
        assert_eq!(*s.last().unwrap(), 25);
        let mut prev = 10;
        for v in s {
            assert!((3..=4).contains(&(v - prev)));
            prev = v;
        }
    }

    #[test]
    fn paper_geometry() {
        let cfg = NetworkConfig::paper();
        let g = Geometry::resolve(&cfg).unwrap();
        assert_eq!(g.lidar_levels[0], (32, 192));
        assert_eq!(g.lidar_levels[4], (2, 12));
        let widths: Vec<_> = g.dt_stages.iter().map(|s| s.output.1).collect();
        assert_eq!(widths, vec![179, 166, 153]);
        assert_eq!(g.dt_output(), (32, 153));
        assert_eq!(g.up_dims, vec![(64, 306), (128, 612)]);
    }

    #[test]
    fn desk_needs_wide_crop() {
        let g = Geometry::resolve(&NetworkConfig::desk()).unwrap();
        assert_eq!(g.dt_output(), (8, 16));
        let st = &g.dt_stages[0];
        assert_eq!((st.input, st.output), ((16, 32), (13, 27)));
        assert_eq!(st.wide_crop, Some((0, 0, 15, 32)));
    }

    #[test]
    fn indivisible_grid_is_geometry_error() {
        let mut cfg = NetworkConfig::desk();
        cfg.spec.rows = 48;
        assert!(matches!(Geometry::resolve(&cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn narrow_branch_too_shrinking_is_rejected() {
        let mut cfg = NetworkConfig::desk();
        // width 32 → 16 over one stage exceeds the 5·4 columns the kernels remove
        cfg.dt_stages = 1;
        cfg.spec.width = 64;
        cfg.spec.cols = 128;
        assert!(matches!(Geometry::resolve(&cfg), Err(Error::Geometry(_))));
    }
}
