//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Graph`] owns every value produced during one forward pass. Operations
//! append a node whose inputs are earlier nodes, so the node list is already in
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::conv::{self, ConvSpec};
use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::spatial;
use crate::tensor::{Dims, Mask, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Deconv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Upsample2x {
        input: Var,
    },
    AvgPool2x {
        input: Var,
        weights: Vec<f64>,
    },
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    /// `direction` holds ∂loss/∂pred, already divided by the valid count.
    MaskedEpe {
        pred: Var,
        direction: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Default leaky-rectifier slope.
pub const LEAKY_SLOPE: f64 = 0.1;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, for leaves that require one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Clears gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor<T>, op: Op) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        self.record(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        )
    }

    /// Transposed convolution; `weight` is laid out (in_ch, out_ch, kh, kw).
    pub fn deconv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::deconv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        self.record(
            "deconv2d",
            out,
            Op::Deconv2d {
                input,
                weight,
                bias,
                spec,
            },
        )
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(TensorError::InvalidArgument(format!(
                "leaky slope {slope} outside (0,1)"
            )));
        }
        let s = T::of(slope);
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * s })
            .collect();
        let out = Tensor::from_vec(x.dims(), data)?;
        self.record("leaky_relu", out, Op::LeakyRelu { input, slope })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = spatial::concat_channels(self.value(a), self.value(b))?;
        self.record("concat_channels", out, Op::Concat { a, b })
    }

    pub fn upsample_bilinear2x(&mut self, input: Var) -> Result<Var> {
        let out = spatial::upsample_bilinear2x(self.value(input))?;
        self.record("bilinear_upsample2x", out, Op::Upsample2x { input })
    }

    /// 2×2 average pooling; see [`spatial::avg_pool2x`] for the masked rule.
    pub fn avg_pool2x(&mut self, input: Var, mask: Option<&Mask>) -> Result<(Var, Mask)> {
        let (weights, out_mask) = spatial::pool_weights(self.dims(input), mask)?;
        let out = spatial::pool_forward(self.value(input), &weights);
        let v = self.record("avg_pool2x", out, Op::AvgPool2x { input, weights })?;
        Ok((v, out_mask))
    }

    pub fn crop(&mut self, input: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let out = spatial::crop(self.value(input), top, left, height, width)?;
        self.record("crop", out, Op::Crop { input, top, left })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dims() != y.dims() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", x.dims().as_array(), y.dims().as_array()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::from_vec(x.dims(), data)?;
        self.record("add", out, Op::Add { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let x = self.value(input);
        let out = Tensor::from_vec(x.dims(), x.data().iter().map(|v| *v * f).collect())?;
        self.record("scale", out, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.record("sum", Tensor::scalar(s), Op::Sum { input })
    }

    /// Mean Euclidean norm of `pred - gt` over the pixels selected by `valid`.
    ///
    /// Both tensors carry the (u, v) pair in channels 0 and 1. Values at invalid
    /// pixels never influence the result or its gradient. At a zero-length
    /// difference the subgradient 0 is used.
    pub fn masked_epe_loss(&mut self, pred: Var, gt: &Tensor<T>, valid: &Mask) -> Result<Var> {
        const OP: &str = "masked_epe_loss";
        let p = self.value(pred);
        let d = p.dims();
        if d != gt.dims() || d.channels != 2 || !valid.matches::<T>(d) {
            return Err(shape_err(
                OP,
                format!(
                    "pred {:?}, gt {:?}, mask {}x{}x{}",
                    d.as_array(),
                    gt.dims().as_array(),
                    valid.batch(),
                    valid.height(),
                    valid.width()
                ),
            ));
        }
        let count = valid.count();
        if count == 0 {
            return Err(TensorError::EmptyMask { op: OP });
        }
        let mut direction = vec![0.0; d.len()];
        let mut total = 0.0f64;
        for b in 0..d.batch {
            for y in 0..d.height {
                for x in 0..d.width {
                    if !valid.get(b, y, x) {
                        continue;
                    }
                    let du = (p.at(b, 0, y, x) - gt.at(b, 0, y, x)).as_f64();
                    let dv = (p.at(b, 1, y, x) - gt.at(b, 1, y, x)).as_f64();
                    let norm = du.hypot(dv);
                    total += norm;
                    if norm > 0.0 {
                        direction[d.index(b, 0, y, x)] = du / norm / count as f64;
                        direction[d.index(b, 1, y, x)] = dv / norm / count as f64;
                    }
                }
            }
        }
        let out = Tensor::scalar(T::of(total / count as f64));
        self.record(OP, out, Op::MaskedEpe { pred, direction })
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// Only leaf gradients are retained afterwards. Running backward a second
    /// time without [`Graph::reset_grads`] fails with [`TensorError::Reentrant`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Reentrant);
        }
        let n = self.value(loss).len();
        if n != 1 {
            return Err(TensorError::NotScalar(n));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, dy: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            }
            | Op::Deconv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let need_input = self.nodes[input.0].requires_grad;
                let (dx, dw, db) = if matches!(node.op, Op::Conv2d { .. }) {
                    conv::conv2d_backward(x, w, *spec, dy, need_input)?
                } else {
                    conv::deconv2d_backward(x, w, *spec, dy, need_input)?
                };
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out.push((*weight, dw));
                if let Some(b) = bias {
                    let db = Tensor::from_vec(self.nodes[b.0].value.dims(), db.into_vec())?;
                    out.push((*b, db));
                }
            }
            Op::LeakyRelu { input, slope } => {
                let s = T::of(*slope);
                let x = &self.nodes[input.0].value;
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v >= T::zero() { g } else { g * s })
                    .collect();
                out.push((*input, Tensor::from_vec(x.dims(), data)?));
            }
            Op::Concat { a, b } => {
                let (ga, gb) = spatial::split_channels(
                    dy,
                    self.nodes[a.0].value.dims(),
                    self.nodes[b.0].value.dims(),
                );
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Upsample2x { input } => {
                let d = self.nodes[input.0].value.dims();
                out.push((*input, spatial::upsample_bilinear2x_backward(d, dy)));
            }
            Op::AvgPool2x { input, weights } => {
                let d = self.nodes[input.0].value.dims();
                out.push((*input, spatial::pool_backward(d, weights, dy)));
            }
            Op::Crop { input, top, left } => {
                let d = self.nodes[input.0].value.dims();
                out.push((*input, spatial::crop_backward(d, *top, *left, dy)));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Scale { input, factor } => {
                let f = T::of(*factor);
                let data = dy.data().iter().map(|g| *g * f).collect();
                out.push((*input, Tensor::from_vec(dy.dims(), data)?));
            }
            Op::Sum { input } => {
                let d = self.nodes[input.0].value.dims();
                out.push((*input, Tensor::full(d, dy.data()[0])));
            }
            Op::MaskedEpe { pred, direction } => {
                let g = dy.data()[0];
                let d = self.nodes[pred.0].value.dims();
                let data = direction.iter().map(|v| T::of(*v) * g).collect();
                out.push((*pred, Tensor::from_vec(d, data)?));
            }
        }
        for (v, g) in out {
            self.accumulate(v, g);
        }
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        }
        | Op::Deconv2d {
            input,
            weight,
            bias,
            ..
        } => {
            let mut v = vec![*input, *weight];
            v.extend(bias);
            v
        }
        Op::LeakyRelu { input, .. }
        | Op::Upsample2x { input }
        | Op::AvgPool2x { input, .. }
        | Op::Crop { input, .. }
        | Op::Scale { input, .. }
        | Op::Sum { input } => vec![*input],
        Op::MaskedEpe { pred, .. } => vec![*pred],
        Op::Concat { a, b } | Op::Add { a, b } => vec![*a, *b],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c + y * x) as f64));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn two_paths_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 1, 2, 2], 3.0));
        let y = g.add(x, x).unwrap();
        let z = g.scale(x, 0.5).unwrap();
        let w = g.add(y, z).unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn backward_twice_is_reentrancy_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 1, 1, 1], 1.0));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::Reentrant));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 1, 2, 1], 1.0));
        assert_eq!(g.backward(x), Err(TensorError::NotScalar(2)));
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec([1, 1, 1, 3], vec![2.0, -2.0, 0.0]).unwrap());
        let y = g.leaky_relu(x, LEAKY_SLOPE).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -0.2, 0.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.1, 1.0]);
        assert!(g.leaky_relu(x, 1.5).is_err());
    }

    #[test]
    fn concat_gradient_routes_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::full([1, 2, 4, 4], 1.0));
        let b = g.param(Tensor::full([1, 3, 4, 4], -1.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.dims(c), Dims::new(1, 5, 4, 4));
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|v| *v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 1, 1, 1], f64::MAX));
        assert_eq!(
            g.scale(x, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let p = g.param(Tensor::full([1, 1, 2, 2], 2.0));
        let y = g.add(x, p).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(p).is_some());
    }
}
