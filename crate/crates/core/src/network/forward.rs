use lidarflow_tensor::{spatial, ConvSpec, Graph, Padding, Real, Tensor, TensorError, Var};

use super::config::{Geometry, NetworkConfig, ShapeReport};
use super::params::{param_layout, NetworkParams, ParamSpec, PRED_KERNEL};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::lidar::{InputNorm, RangeImage};

/// A resolved architecture: config, stage geometry and parameter layout.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    geom: Geometry,
    layout: Vec<ParamSpec>,
}

/// Parameter tensors registered in one graph, in layout order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"));
        self.vars[i]
    }
}

/// Network inputs at full lidar resolution and pooled to half resolution.
#[derive(Clone, Debug)]
pub struct NetworkInputs<T> {
    pub xt: Tensor<T>,
    pub xt1: Tensor<T>,
    pub xt_half: Tensor<T>,
    pub xt1_half: Tensor<T>,
}

impl<T: Real> NetworkInputs<T> {
    pub fn from_range_images(xt: &RangeImage, xt1: &RangeImage, norm: &InputNorm) -> Result<Self> {
        if (xt.rows(), xt.cols()) != (xt1.rows(), xt1.cols()) {
            return Err(Error::Shape(format!(
                "frames differ: {}x{} vs {}x{}",
                xt.rows(),
                xt.cols(),
                xt1.rows(),
                xt1.cols()
            )));
        }
        let half = |img: &RangeImage, t: &Tensor<T>| -> Result<Tensor<T>> {
            Ok(spatial::avg_pool2x(t, Some(&img.mask()))?.0)
        };
        let (a, b) = (xt.to_tensor(norm), xt1.to_tensor(norm));
        Ok(Self {
            xt_half: half(xt, &a)?,
            xt1_half: half(xt1, &b)?,
            xt: a,
            xt1: b,
        })
    }
}

/// Graph nodes of every prediction site.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Coarse to fine; the last is Y_Lidar.
    pub lidar_preds: Vec<Var>,
    /// The last is Y_Up.
    pub up_preds: Vec<Var>,
    /// The last is Y_End.
    pub refine_preds: Vec<Var>,
    pub final_flow: Var,
}

impl ForwardVars {
    /// All loss sites in order: lidar, upscaling, refinement.
    pub fn sites(&self) -> Vec<Var> {
        self.lidar_preds
            .iter()
            .chain(&self.up_preds)
            .chain(&self.refine_preds)
            .copied()
            .collect()
    }
}

/// Values of every prediction site.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T> {
    pub lidar_preds: Vec<Tensor<T>>,
    pub up_preds: Vec<Tensor<T>>,
    pub refine_preds: Vec<Tensor<T>>,
    pub final_flow: Tensor<T>,
}

impl<T: Real> ForwardOutputs<T> {
    fn collect(g: &Graph<T>, v: &ForwardVars) -> Self {
        let take = |vs: &[Var]| vs.iter().map(|&x| g.value(x).clone()).collect();
        Self {
            lidar_preds: take(&v.lidar_preds),
            up_preds: take(&v.up_preds),
            refine_preds: take(&v.refine_preds),
            final_flow: g.value(v.final_flow).clone(),
        }
    }

    pub fn sites(&self) -> Vec<&Tensor<T>> {
        self.lidar_preds
            .iter()
            .chain(&self.up_preds)
            .chain(&self.refine_preds)
            .collect()
    }

    /// The full-resolution prediction of batch item `b`.
    pub fn final_field(&self, b: usize) -> Result<FlowField> {
        FlowField::from_tensor(&self.final_flow, b)
    }
}

/// Names the layer in non-finite errors. The iteration is unknown here; training
/// fills it in.
fn in_layer(e: TensorError, layer: &str) -> Error {
    match e {
        TensorError::NonFinite { op } => Error::NonFiniteLoss {
            iter: 0,
            term: format!("{layer} ({op})"),
        },
        other => other.into(),
    }
}

/// Stride-1 "same" padding for a square kernel.
fn same(k: usize) -> ConvSpec {
    ConvSpec::unit(Padding::uniform(k / 2))
}

const UP2: ConvSpec = ConvSpec::new((2, 2), Padding::uniform(1));

impl Network {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        let geom = Geometry::resolve(&cfg)?;
        let layout = param_layout(&cfg);
        Ok(Self { cfg, geom, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn shapes(&self) -> ShapeReport {
        ShapeReport::new(&self.cfg, &self.geom)
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Result<NetworkParams<T>> {
        NetworkParams::init(&self.cfg, seed)
    }

    /// Registers every parameter as a graph leaf; `trainable` decides whether they
    /// receive gradients.
    pub fn bind<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &NetworkParams<T>,
        trainable: bool,
    ) -> Result<BoundParams> {
        params.check_layout(&self.cfg)?;
        let vars = params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Ok(BoundParams {
            vars,
            names: params.names().to_vec(),
        })
    }

    fn conv<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        name: &str,
        x: Var,
        spec: ConvSpec,
    ) -> Result<Var> {
        let w = p.get(&format!("{name}.w"));
        let b = p.get(&format!("{name}.b"));
        g.conv2d(x, w, Some(b), spec).map_err(|e| in_layer(e, name))
    }

    fn deconv<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let w = p.get(&format!("{name}.w"));
        let b = p.get(&format!("{name}.b"));
        g.deconv2d(x, w, Some(b), UP2).map_err(|e| in_layer(e, name))
    }

    fn act<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(g.leaky_relu(x, self.cfg.leaky_slope)?)
    }

    fn pred<T: Real>(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        self.conv(g, p, name, x, same(PRED_KERNEL))
    }

    fn expect_dims<T: Real>(&self, g: &Graph<T>, v: Var, what: &str, hw: (usize, usize)) -> Result<()> {
        let d = g.dims(v);
        if (d.height, d.width) != hw {
            return Err(Error::Shape(format!(
                "{what} is {}x{}, expected {}x{}",
                d.height, d.width, hw.0, hw.1
            )));
        }
        Ok(())
    }

    /// Lidar-flow block. Returns Y_Lidar and the predictions coarse to fine.
    pub fn forward_lidar_flow<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        xt: Var,
        xt1: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let s = &self.cfg.spec;
        self.expect_dims(g, xt, "X_t", (s.rows, s.cols))?;
        self.expect_dims(g, xt1, "X_t+1", (s.rows, s.cols))?;
        let levels = self.cfg.contraction_levels;
        let mut skips = Vec::with_capacity(levels);
        let mut x = g.concat_channels(xt, xt1)?;
        for l in 1..=levels {
            let k = self.cfg.contraction_kernel(l);
            let spec = ConvSpec::new((2, 2), Padding::uniform(k / 2));
            let c = self.conv(g, p, &format!("lidar.conv{l}"), x, spec)?;
            x = self.act(g, c)?;
            skips.push(x);
        }
        let mut pred = self.pred(g, p, &format!("lidar.pred{levels}"), x)?;
        let mut preds = vec![pred];
        let mut feat = x;
        for l in (1..levels).rev() {
            let up = self.deconv(g, p, &format!("lidar.deconv{l}"), feat)?;
            let up = self.act(g, up)?;
            let flow_up = g.upsample_bilinear2x(pred)?;
            let cat = g.concat_channels(skips[l - 1], up)?;
            feat = g.concat_channels(cat, flow_up)?;
            pred = self.pred(g, p, &format!("lidar.pred{l}"), feat)?;
            preds.push(pred);
        }
        Ok((pred, preds))
    }

    /// Domain transformation and upscaling. Returns Y_Up, the upscaling predictions and
    /// the feature map carried into refinement.
    pub fn forward_domain_transform<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        xt_half: Var,
        xt1_half: Var,
        y_lidar: Var,
    ) -> Result<(Var, Vec<Var>, Var)> {
        let a = self.forward_sub_block_a(g, p, xt_half, xt1_half, y_lidar)?;
        let mut feat = a;
        let mut preds = Vec::with_capacity(self.cfg.dt_upscale_stages);
        for i in 1..=self.cfg.dt_upscale_stages {
            let input = match preds.last() {
                Some(&prev) => g.concat_channels(feat, prev)?,
                None => feat,
            };
            let up = self.deconv(g, p, &format!("up.deconv{i}"), input)?;
            feat = self.act(g, up)?;
            preds.push(self.pred(g, p, &format!("up.pred{i}"), feat)?);
        }
        let y_up = *preds.last().expect("at least one upscaling stage");
        Ok((y_up, preds, feat))
    }

    /// Two-branch stages from (N/2, M/2) to (H/8, W/8); no prediction.
    pub fn forward_sub_block_a<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        xt_half: Var,
        xt1_half: Var,
        y_lidar: Var,
    ) -> Result<Var> {
        let half = self.geom.lidar_levels[0];
        for (v, what) in [(xt_half, "X'_t"), (xt1_half, "X'_t+1"), (y_lidar, "Y_Lidar")] {
            self.expect_dims(g, v, what, half)?;
        }
        let cat = g.concat_channels(xt_half, xt1_half)?;
        let mut x = g.concat_channels(cat, y_lidar)?;
        for (si, stage) in self.geom.dt_stages.iter().enumerate() {
            let s = si + 1;
            let mut narrow = x;
            for (j, pad) in stage.narrow_pads.iter().enumerate() {
                let name = format!("up.stage{s}.narrow{}", j + 1);
                let c = self.conv(g, p, &name, narrow, ConvSpec::unit(*pad))?;
                narrow = self.act(g, c)?;
            }
            let wide_in = match stage.wide_crop {
                Some((top, left, h, w)) => g.crop(x, top, left, h, w)?,
                None => x,
            };
            let wide = self.conv(g, p, &format!("up.stage{s}.wide"), wide_in, ConvSpec::unit(stage.wide_pad))?;
            let wide = self.act(g, wide)?;
            x = g.concat_channels(narrow, wide)?;
            self.expect_dims(g, x, "two-branch stage output", stage.output)?;
        }
        Ok(x)
    }

    /// Refinement iterations. Returns Y_End and every iteration's prediction.
    pub fn forward_refinement<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        y_up: Var,
        carry: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let hw = self.geom.refine_dims();
        self.expect_dims(g, y_up, "Y_Up", hw)?;
        self.expect_dims(g, carry, "carried features", hw)?;
        let (mut feat, mut pred) = (carry, y_up);
        let mut preds = Vec::with_capacity(self.cfg.refine_iters);
        for i in 1..=self.cfg.refine_iters {
            let mut x = g.concat_channels(feat, pred)?;
            for j in 1..=self.cfg.refine_convs_per_iter {
                let c = self.conv(g, p, &format!("refine.iter{i}.conv{j}"), x, same(3))?;
                x = self.act(g, c)?;
            }
            feat = x;
            pred = self.pred(g, p, &format!("refine.iter{i}.pred"), feat)?;
            preds.push(pred);
        }
        Ok((pred, preds))
    }

    /// All three blocks on graph nodes; inputs are registered as constants.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        inputs: &NetworkInputs<T>,
    ) -> Result<ForwardVars> {
        let xt = g.constant(inputs.xt.clone());
        let xt1 = g.constant(inputs.xt1.clone());
        let xth = g.constant(inputs.xt_half.clone());
        let xt1h = g.constant(inputs.xt1_half.clone());
        let (y_lidar, lidar_preds) = self.forward_lidar_flow(g, p, xt, xt1)?;
        let (y_up, up_preds, carry) = self.forward_domain_transform(g, p, xth, xt1h, y_lidar)?;
        let (y_end, refine_preds) = self.forward_refinement(g, p, y_up, carry)?;
        let final_flow = g.upsample_bilinear2x(y_end)?;
        Ok(ForwardVars {
            lidar_preds,
            up_preds,
            refine_preds,
            final_flow,
        })
    }

    /// Inference on tensors, without gradients.
    pub fn full_forward<T: Real>(
        &self,
        params: &NetworkParams<T>,
        inputs: &NetworkInputs<T>,
    ) -> Result<ForwardOutputs<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let vars = self.forward(&mut g, &p, inputs)?;
        Ok(ForwardOutputs::collect(&g, &vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_inputs<T: Real>(net: &Network) -> NetworkInputs<T> {
        let s = net.config().spec;
        let mut a = RangeImage::empty(s.rows, s.cols);
        let mut b = RangeImage::empty(s.rows, s.cols);
        for r in 0..s.rows {
            for c in 0..s.cols {
                if (r + c) % 3 != 0 {
                    a.set(r, c, Some((5.0 + (r * c % 7) as f32, 0.5)));
                    b.set(r, c, Some((6.0 + (r + c) as f32 * 0.1, 0.25)));
                }
            }
        }
        NetworkInputs::from_range_images(&a, &b, &InputNorm::default()).unwrap()
    }

    #[test]
    fn desk_shapes_match_report() {
        let net = Network::new(NetworkConfig::desk()).unwrap();
        let params = net.init_params::<f64>(1).unwrap();
        let out = net.full_forward(&params, &desk_inputs(&net)).unwrap();
        let rep = net.shapes();
        let hwc = |t: &Tensor<f64>| (t.dims().height, t.dims().width, t.dims().channels);
        let got: Vec<_> = out.lidar_preds.iter().map(hwc).collect();
        assert_eq!(got, rep.lidar_preds);
        assert_eq!(hwc(&out.up_preds[1]), rep.y_up);
        assert_eq!(hwc(&out.refine_preds[4]), rep.y_end);
        assert_eq!(hwc(&out.final_flow), (64, 128, 2));
        assert_eq!(out.sites().len(), 12);
    }

    #[test]
    fn zero_inputs_and_biases_predict_zero() {
        let net = Network::new(NetworkConfig::desk()).unwrap();
        let params = net.init_params::<f64>(3).unwrap();
        let s = net.config().spec;
        let e = RangeImage::empty(s.rows, s.cols);
        let inputs = NetworkInputs::from_range_images(&e, &e, &InputNorm::default()).unwrap();
        let out = net.full_forward(&params, &inputs).unwrap();
        for t in out.sites() {
            assert!(t.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::new(NetworkConfig::desk()).unwrap();
        let params = net.init_params::<f32>(5).unwrap();
        let inputs = desk_inputs(&net);
        assert_eq!(
            net.full_forward(&params, &inputs).unwrap(),
            net.full_forward(&params, &inputs).unwrap()
        );
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let net = Network::new(NetworkConfig::desk()).unwrap();
        let mut cfg = NetworkConfig::desk();
        cfg.base_channels = 8;
        let other = NetworkParams::<f32>::init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        assert!(net.bind(&mut g, &other, false).is_err());
    }
}
