#![allow(dead_code)]

use lidarflow_tensor::{Dims, Graph, Real, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(dims: impl Into<Dims>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let dims = dims.into();
    let data = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(dims, data).unwrap()
}

/// Builds a scalar loss from leaves that all require gradients.
pub trait LossFn {
    fn build<T: Real>(&self, g: &mut Graph<T>, leaves: &[Var]) -> Var;
}

fn loss_at<L: LossFn>(f: &L, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = f.build(&mut g, &leaves);
    g.value(l).data()[0]
}

/// Central finite differences in 64-bit of every input element.
pub fn numeric_grads<L: LossFn>(f: &L, inputs: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = loss_at(f, &work);
            work[i].data_mut()[j] = orig - h;
            let down = loss_at(f, &work);
            work[i].data_mut()[j] = orig;
            gi.push((up - down) / (2.0 * h));
        }
        out.push(gi);
    }
    out
}

pub fn analytic_grads<T: Real, L: LossFn>(f: &L, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let l = f.build(&mut g, &leaves);
    g.backward(l).unwrap();
    leaves
        .iter()
        .map(|v| match g.grad(*v) {
            Some(t) => t.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; g.value(*v).len()],
        })
        .collect()
}

/// Largest `|a-n| / max(|a|, |n|, floor)` over all elements.
pub fn max_rel_err(a: &[Vec<f64>], n: &[Vec<f64>], floor: f64) -> f64 {
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Max relative error of the 64-bit analytic gradient against finite differences.
pub fn grad_err_f64<L: LossFn>(f: &L, inputs: &[Tensor<f64>]) -> f64 {
    let n = numeric_grads(f, inputs, 1e-5);
    let a = analytic_grads::<f64, L>(f, inputs);
    max_rel_err(&a, &n, 1e-6)
}

/// 32-bit analytic gradient against 64-bit finite differences at the same (rounded)
/// inputs. The floor is relative to the largest gradient entry.
pub fn grad_err_f32<L: LossFn>(f: &L, inputs: &[Tensor<f64>]) -> f64 {
    let rounded: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast::<f32>().cast()).collect();
    let n = numeric_grads(f, &rounded, 1e-5);
    let a = analytic_grads::<f32, L>(f, &rounded);
    let scale = n.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    max_rel_err(&a, &n, 1e-2 * scale)
}
