//! Flag and config-file resolution. Flags win over `key=value` file entries, which
//! win over built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use lidarflow::lidar::{CameraModel, GridSpec, InputNorm, LIDAR_TO_CAMERA_AXES};
use lidarflow::training::TrainConfig;
use lidarflow::{Error, Result};

use crate::{GridArgs, NormArgs, Precision, Preset, TrainArgs};

#[derive(Debug, Default)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("config line {}: expected key=value", n + 1)));
            };
            map.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                Self::parse(&text)
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

pub fn pick<T: FromStr>(flag: Option<T>, kv: &KeyValues, key: &str, default: T) -> Result<T> {
    Ok(pick_opt(flag, kv, key)?.unwrap_or(default))
}

pub fn pick_opt<T: FromStr>(flag: Option<T>, kv: &KeyValues, key: &str) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    kv.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        })
        .transpose()
}

pub fn grid_spec(a: &GridArgs, kv: &KeyValues) -> Result<GridSpec> {
    let preset = match (a.preset, kv.get("preset")) {
        (Some(p), _) => p,
        (None, Some("paper")) => Preset::Paper,
        (None, Some("desk") | None) => Preset::Desk,
        (None, Some(other)) => return Err(Error::Config(format!("unknown preset {other:?}"))),
    };
    let mut s = match preset {
        Preset::Desk => GridSpec::desk(),
        Preset::Paper => GridSpec::paper(),
    };
    s.rows = pick(a.rows, kv, "rows", s.rows)?;
    s.cols = pick(a.cols, kv, "cols", s.cols)?;
    s.height = pick(a.height, kv, "height", s.height)?;
    s.width = pick(a.width, kv, "width", s.width)?;
    let deg = |flag: Option<f64>, key: &str, cur: f64| -> Result<f64> {
        Ok(pick_opt(flag, kv, key)?.map_or(cur, f64::to_radians))
    };
    s.azimuth = (
        deg(a.azimuth_min, "azimuth_min", s.azimuth.0)?,
        deg(a.azimuth_max, "azimuth_max", s.azimuth.1)?,
    );
    s.elevation = (
        deg(a.elevation_min, "elevation_min", s.elevation.0)?,
        deg(a.elevation_max, "elevation_max", s.elevation.1)?,
    );
    s.validate()?;
    Ok(s)
}

pub fn camera(spec: &GridSpec, intrinsics: [Option<f64>; 4], translation: Option<&[f64]>) -> Result<CameraModel> {
    let mut cam = match intrinsics {
        [None, None, None, None] => CameraModel::fitted(spec),
        [Some(fx), Some(fy), Some(cx), Some(cy)] => {
            CameraModel::new(fx, fy, cx, cy, LIDAR_TO_CAMERA_AXES, [0.0; 3])?
        }
        _ => return Err(Error::Config("give all of --fx --fy --cx --cy or none".into())),
    };
    if let Some(t) = translation {
        cam.translation = [t[0], t[1], t[2]];
    }
    Ok(cam)
}

pub fn norm(a: &NormArgs, kv: &KeyValues) -> Result<InputNorm> {
    Ok(InputNorm {
        range: (
            pick(a.range_scale, kv, "range_scale", 1.0)?,
            pick(a.range_offset, kv, "range_offset", 0.0)?,
        ),
        reflectivity: (
            pick(a.refl_scale, kv, "refl_scale", 1.0)?,
            pick(a.refl_offset, kv, "refl_offset", 0.0)?,
        ),
    })
}

pub fn precision(flag: Option<Precision>, kv: &KeyValues) -> Result<Precision> {
    match (flag, kv.get("precision")) {
        (Some(p), _) => Ok(p),
        (None, None | Some("f32")) => Ok(Precision::F32),
        (None, Some("f64")) => Ok(Precision::F64),
        (None, Some(other)) => Err(Error::Config(format!("unknown precision {other:?}"))),
    }
}

pub struct TrainOptions {
    pub train: TrainConfig,
    pub base_channels: usize,
    pub precision: Precision,
}

impl TrainOptions {
    /// Resolved settings as `key=value` pairs for the run manifest.
    pub fn snapshot(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let lambdas: Vec<_> = t.lambdas.iter().map(f64::to_string).collect();
        [
            ("iters", t.total_iters.to_string()),
            ("batch", t.batch_size.to_string()),
            ("lr", t.lr0.to_string()),
            ("lr_hold", t.lr_hold.to_string()),
            ("lr_half_every", t.lr_half_every.to_string()),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("eps", t.adam.eps.to_string()),
            ("flip_prob", t.flip_prob.to_string()),
            ("lambdas", lambdas.join(",")),
            ("seed", t.seed.to_string()),
            ("grad_clip", t.grad_clip.map_or("off".into(), |c| c.to_string())),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("range_scale", t.norm.range.0.to_string()),
            ("range_offset", t.norm.range.1.to_string()),
            ("refl_scale", t.norm.reflectivity.0.to_string()),
            ("refl_offset", t.norm.reflectivity.1.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("precision", format!("{:?}", self.precision).to_lowercase()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub fn train_options(a: &TrainArgs, kv: &KeyValues) -> Result<TrainOptions> {
    let d = TrainConfig::default();
    let lambdas = match kv.get("lambdas") {
        None => d.lambdas.clone(),
        Some(s) => s
            .split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad loss weight {x:?}")))
            })
            .collect::<Result<Vec<f64>>>()?,
    };
    let train = TrainConfig {
        total_iters: pick(a.iters, kv, "iters", 2000)?,
        batch_size: pick(a.batch, kv, "batch", d.batch_size)?,
        lr0: pick(a.lr, kv, "lr", d.lr0)?,
        lr_hold: pick(a.lr_hold, kv, "lr_hold", d.lr_hold)?,
        lr_half_every: pick(a.lr_half_every, kv, "lr_half_every", d.lr_half_every)?,
        adam: lidarflow::tensor::Adam {
            beta1: pick(None, kv, "beta1", d.adam.beta1)?,
            beta2: pick(None, kv, "beta2", d.adam.beta2)?,
            eps: pick(None, kv, "eps", d.adam.eps)?,
        },
        flip_prob: pick(a.flip_prob, kv, "flip_prob", d.flip_prob)?,
        lambdas,
        seed: pick(a.seed, kv, "seed", d.seed)?,
        grad_clip: pick_opt(a.grad_clip, kv, "grad_clip")?,
        checkpoint_every: pick(a.checkpoint_every, kv, "checkpoint_every", 0)?,
        norm: norm(&a.norm, kv)?,
    };
    Ok(TrainOptions {
        train,
        base_channels: pick(a.base_channels, kv, "base_channels", 16)?,
        precision: precision(a.precision, kv)?,
    })
}
