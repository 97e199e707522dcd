use std::collections::HashMap;

use lidarflow_tensor::{he_init, Dims, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Dims,
    pub kind: ParamKind,
}

/// Transposed-convolution kernel size; stride 2 and pad 1 double the input exactly.
pub const DECONV_KERNEL: usize = 4;
pub const PRED_KERNEL: usize = 3;

struct Layout(Vec<ParamSpec>);

impl Layout {
    fn conv(&mut self, name: String, cin: usize, cout: usize, (kh, kw): (usize, usize)) {
        self.push(name, [cout, cin, kh, kw], cout);
    }

    /// Transposed-convolution weights are stored (in, out, kh, kw).
    fn deconv(&mut self, name: String, cin: usize, cout: usize) {
        self.push(name, [cin, cout, DECONV_KERNEL, DECONV_KERNEL], cout);
    }

    fn push(&mut self, name: String, w: [usize; 4], out: usize) {
        self.0.push(ParamSpec {
            name: format!("{name}.w"),
            dims: w.into(),
            kind: ParamKind::Weight,
        });
        self.0.push(ParamSpec {
            name: format!("{name}.b"),
            dims: [out, 1, 1, 1].into(),
            kind: ParamKind::Bias,
        });
    }
}

/// Channels of the lidar-block feature map entering expansion at level `l`.
pub(crate) fn lidar_feature_channels(cfg: &NetworkConfig, l: usize) -> usize {
    if l == cfg.contraction_levels {
        cfg.contraction_channels(l)
    } else {
        2 * cfg.contraction_channels(l) + 2
    }
}

/// Every parameter in registration order: lidar block, domain transform, refinement.
pub fn param_layout(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let mut out = Layout(Vec::new());
    let levels = cfg.contraction_levels;
    let pk = (PRED_KERNEL, PRED_KERNEL);
    for l in 1..=levels {
        let cin = if l == 1 { 4 } else { cfg.contraction_channels(l - 1) };
        let k = cfg.contraction_kernel(l);
        out.conv(format!("lidar.conv{l}"), cin, cfg.contraction_channels(l), (k, k));
    }
    out.conv(format!("lidar.pred{levels}"), cfg.contraction_channels(levels), 2, pk);
    for l in (1..levels).rev() {
        let ch = cfg.contraction_channels(l);
        out.deconv(format!("lidar.deconv{l}"), lidar_feature_channels(cfg, l + 1), ch);
        out.conv(format!("lidar.pred{l}"), lidar_feature_channels(cfg, l), 2, pk);
    }
    let c = cfg.base_channels;
    for s in 1..=cfg.dt_stages {
        let cin = if s == 1 { 6 } else { 2 * c };
        for j in 1..=cfg.narrow_layers {
            let nin = if j == 1 { cin } else { c };
            out.conv(format!("up.stage{s}.narrow{j}"), nin, c, cfg.narrow_kernel);
        }
        out.conv(format!("up.stage{s}.wide"), cin, c, cfg.wide_kernel);
    }
    for i in 1..=cfg.dt_upscale_stages {
        let cin = if i == 1 { 2 * c } else { c + 2 };
        out.deconv(format!("up.deconv{i}"), cin, c);
        out.conv(format!("up.pred{i}"), c, 2, pk);
    }
    for i in 1..=cfg.refine_iters {
        for j in 1..=cfg.refine_convs_per_iter {
            let cin = if j == 1 { c + 2 } else { c };
            out.conv(format!("refine.iter{i}.conv{j}"), cin, c, (3, 3));
        }
        out.conv(format!("refine.iter{i}.pred"), c, 2, pk);
    }
    out.0
}

/// Total scalar parameter count, from the architecture formulas alone.
pub fn param_count(cfg: &NetworkConfig) -> usize {
    let conv = |cin: usize, cout: usize, kh: usize, kw: usize| cout * cin * kh * kw + cout;
    let deconv = |cin: usize, cout: usize| conv(cin, cout, DECONV_KERNEL, DECONV_KERNEL);
    let pred = |cin: usize| conv(cin, 2, PRED_KERNEL, PRED_KERNEL);
    let ch = |l: usize| cfg.contraction_channels(l);
    let feat = |l: usize| lidar_feature_channels(cfg, l);
    let levels = cfg.contraction_levels;

    let contraction: usize = (1..=levels)
        .map(|l| {
            let k = cfg.contraction_kernel(l);
            conv(if l == 1 { 4 } else { ch(l - 1) }, ch(l), k, k)
        })
        .sum();
    let expansion: usize = (1..levels).map(|l| deconv(feat(l + 1), ch(l)) + pred(feat(l))).sum();
    let lidar = contraction + pred(ch(levels)) + expansion;

    let c = cfg.base_channels;
    let (nh, nw) = cfg.narrow_kernel;
    let (wh, ww) = cfg.wide_kernel;
    let stage = |cin: usize| {
        conv(cin, c, nh, nw) + (cfg.narrow_layers - 1) * conv(c, c, nh, nw) + conv(cin, c, wh, ww)
    };
    let a = stage(6) + (cfg.dt_stages - 1) * stage(2 * c);
    let b = if cfg.dt_upscale_stages == 0 {
        0
    } else {
        deconv(2 * c, c) + (cfg.dt_upscale_stages - 1) * deconv(c + 2, c) + cfg.dt_upscale_stages * pred(c)
    };
    let per_iter = conv(c + 2, c, 3, 3) + (cfg.refine_convs_per_iter - 1) * conv(c, c, 3, 3) + pred(c);
    lidar + a + b + cfg.refine_iters * per_iter
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> NetworkParams<T> {
    pub fn from_named(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let (mut names, mut tensors) = (Vec::new(), Vec::new());
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Config(format!("parameter {name} registered twice")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    /// He-initialized weights and zero biases, deterministic in `seed`.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = param_layout(cfg)
            .into_iter()
            .map(|p| {
                let t = match p.kind {
                    ParamKind::Weight => he_init(p.dims, &mut rng)?,
                    ParamKind::Bias => Tensor::zeros(p.dims),
                };
                Ok((p.name, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_named(entries)
    }

    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let entries = param_layout(cfg)
            .into_iter()
            .map(|p| (p.name, Tensor::zeros(p.dims)))
            .collect();
        Self::from_named(entries).expect("layout names are unique")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names, order and dims against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &NetworkConfig) -> Result<()> {
        let layout = param_layout(cfg);
        if layout.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.len()
            )));
        }
        for (spec, (name, t)) in layout.iter().zip(self.iter()) {
            if spec.name != name || spec.dims != t.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.dims().as_array(),
                    spec.name,
                    spec.dims.as_array()
                )));
            }
        }
        Ok(())
    }
}
