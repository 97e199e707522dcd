//! End-to-end optimization with the twelve-site loss.

use lidarflow_tensor::{spatial, Adam, AdamState, Graph, Mask, Real, Tensor, TensorError, Var};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::lidar::{InputNorm, RangeImage, SparseLidarFlow};
use crate::network::{Checkpoint, ForwardVars, Network, NetworkInputs, NetworkParams};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_hold: usize,
    pub lr_half_every: usize,
    pub adam: Adam,
    pub flip_prob: f64,
    /// One weight per loss site.
    pub lambdas: Vec<f64>,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Emit a checkpoint every this many iterations; off when 0.
    pub checkpoint_every: usize,
    pub norm: InputNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 400_000,
            batch_size: 10,
            lr0: 1e-3,
            lr_hold: 150_000,
            lr_half_every: 60_000,
            adam: Adam::default(),
            flip_prob: 0.5,
            lambdas: vec![1.0; 12],
            seed: 0,
            grad_clip: None,
            checkpoint_every: 0,
            norm: InputNorm::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sites: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.lr_half_every == 0 {
            return bad("batch_size and lr_half_every must be positive".into());
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0,1]", self.flip_prob));
        }
        if self.lambdas.len() != sites {
            return bad(format!("{} loss weights for {sites} sites", self.lambdas.len()));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("Adam parameters out of range".into());
        }
        Ok(())
    }
}

/// Learning rate at `iter`: `lr0` until `lr_hold`, halved there and every
/// `lr_half_every` iterations after.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter < cfg.lr_hold {
        return cfg.lr0;
    }
    let halvings = 1 + (iter - cfg.lr_hold) / cfg.lr_half_every;
    cfg.lr0 / 2f64.powi(halvings.min(1000) as i32)
}

/// Ground truth for one loss site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTarget {
    pub flow: Tensor<f64>,
    pub valid: Mask,
}

impl SiteTarget {
    fn from_field(f: &FlowField) -> Self {
        Self {
            flow: f.to_tensor(),
            valid: f.mask(),
        }
    }

    fn pooled(&self) -> Result<Self> {
        let (flow, valid) = spatial::avg_pool2x(&self.flow, Some(&self.valid))?;
        Ok(Self { flow, valid })
    }

    fn mirrored(&self) -> Self {
        let mut flow = self.flow.flip_horizontal();
        let d = flow.dims();
        for b in 0..d.batch {
            let plane = &mut flow.item_mut(b)[..d.plane()];
            plane.iter_mut().for_each(|u| *u = -*u);
        }
        Self {
            flow,
            valid: self.valid.flip_horizontal(),
        }
    }
}

/// Two frames with dense and lidar ground truth plus the per-site pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub xt: RangeImage,
    pub xt1: RangeImage,
    pub gt_dense: FlowField,
    pub gt_lidar: SparseLidarFlow,
    /// Lidar sites coarse to fine, then upscaling sites, then refinement sites.
    pub targets: Vec<SiteTarget>,
}

impl TrainSample {
    /// Builds the pyramid: sparse-aware pooling of GT_Lidar for the lidar sites and
    /// mean pooling of GT_Dense for the image sites. Flow vectors keep full-image units.
    pub fn new(
        net: &Network,
        xt: RangeImage,
        xt1: RangeImage,
        gt_dense: FlowField,
        gt_lidar: SparseLidarFlow,
    ) -> Result<Self> {
        let cfg = net.config();
        let s = &cfg.spec;
        if (xt.rows(), xt.cols()) != (s.rows, s.cols) || (xt1.rows(), xt1.cols()) != (s.rows, s.cols) {
            return Err(Error::Shape("range images do not match the grid".into()));
        }
        if gt_dense.dims() != (s.height, s.width) {
            return Err(Error::Shape(format!(
                "GT_Dense is {}x{}, expected {}x{}",
                gt_dense.height(),
                gt_dense.width(),
                s.height,
                s.width
            )));
        }
        if gt_lidar.flow().dims() != (s.rows, s.cols) {
            return Err(Error::Shape("GT_Lidar does not match the grid".into()));
        }
        let mut lidar = Vec::with_capacity(cfg.contraction_levels);
        let mut cur = SiteTarget::from_field(gt_lidar.flow());
        for _ in 0..cfg.contraction_levels {
            cur = cur.pooled()?;
            lidar.push(cur.clone());
        }
        lidar.reverse();
        let mut dense = vec![SiteTarget::from_field(&gt_dense)];
        for _ in 0..cfg.dt_upscale_stages {
            let next = dense.last().expect("nonempty").pooled()?;
            dense.push(next);
        }
        // dense[k] is at 1/2^k; upscaling sites run coarse to fine from 1/2^U to 1/2
        let up: Vec<_> = (1..=cfg.dt_upscale_stages).rev().map(|k| dense[k].clone()).collect();
        let refine = vec![dense[1].clone(); cfg.refine_iters];
        let mut targets = lidar;
        targets.extend(up);
        targets.extend(refine);
        Ok(Self {
            xt,
            xt1,
            gt_dense,
            gt_lidar,
            targets,
        })
    }

    pub fn inputs<T: Real>(&self, norm: &InputNorm) -> Result<NetworkInputs<T>> {
        NetworkInputs::from_range_images(&self.xt, &self.xt1, norm)
    }

    /// Column-wise mirror of every frame, flow and mask, negating u.
    pub fn mirrored(&self) -> Self {
        Self {
            xt: self.xt.mirrored(),
            xt1: self.xt1.mirrored(),
            gt_dense: self.gt_dense.mirrored(),
            gt_lidar: self.gt_lidar.mirrored(),
            targets: self.targets.iter().map(SiteTarget::mirrored).collect(),
        }
    }
}

/// Mirrors the sample with probability `flip_prob`; consumes one draw from `rng`.
pub fn augment_flip<R: Rng + ?Sized>(sample: &TrainSample, flip_prob: f64, rng: &mut R) -> TrainSample {
    if rng.random_bool(flip_prob) {
        sample.mirrored()
    } else {
        sample.clone()
    }
}

/// Site names used in traces, in site order.
pub fn site_names(net: &Network) -> Vec<String> {
    let cfg = net.config();
    let mut names: Vec<String> = (1..=cfg.contraction_levels)
        .rev()
        .map(|l| format!("lidar_1_{}", 1 << l))
        .collect();
    names.extend((1..=cfg.dt_upscale_stages).rev().map(|k| format!("up_1_{}", 1 << k)));
    names.extend((1..=cfg.refine_iters).map(|i| format!("refine{i}")));
    names
}

/// Builds Σ λ_i·EPE_i on the graph. Returns the loss node and each site's
/// unweighted value, `None` where the site's mask is empty.
pub fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    sites: &[Var],
    targets: &[SiteTarget],
    lambdas: &[f64],
) -> Result<(Var, Vec<Option<f64>>)> {
    if sites.len() != targets.len() || sites.len() != lambdas.len() {
        return Err(Error::Shape(format!(
            "{} sites, {} targets, {} weights",
            sites.len(),
            targets.len(),
            lambdas.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut values = Vec::with_capacity(sites.len());
    for ((&pred, target), &lambda) in sites.iter().zip(targets).zip(lambdas) {
        if target.valid.count() == 0 {
            values.push(None);
            continue;
        }
        let epe = g.masked_epe_loss(pred, &target.flow.cast(), &target.valid)?;
        values.push(Some(g.value(epe).data()[0].as_f64()));
        let term = g.scale(epe, lambda)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Degenerate("every loss site has an empty mask".into()))?;
    Ok((total, values))
}

/// Σ λ_i·EPE_i of precomputed predictions, in site order.
pub fn total_loss<T: Real>(preds: &[&Tensor<T>], targets: &[SiteTarget], lambdas: &[f64]) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let sites: Vec<_> = preds.iter().map(|t| g.constant((*t).clone())).collect();
    let (loss, _) = loss_graph(&mut g, &sites, targets, lambdas)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub lr: f64,
    /// Batch mean per site over the samples where the site is defined.
    pub sites: Vec<Option<f64>>,
    pub total: f64,
}

pub fn trace_csv(names: &[String], rows: &[TraceRow]) -> String {
    let mut out = format!("iter,lr,{},total\n", names.join(","));
    for r in rows {
        out.push_str(&format!("{},{:e}", r.iter, r.lr));
        for s in &r.sites {
            out.push(',');
            if let Some(v) = s {
                out.push_str(&format!("{v:.9e}"));
            }
        }
        out.push_str(&format!(",{:.9e}\n", r.total));
    }
    out
}

/// Parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: NetworkParams<T>,
    pub adam: Vec<AdamState<T>>,
    /// Iterations completed.
    pub iter: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: NetworkParams<T>) -> Self {
        let adam = params.tensors().iter().map(|t| AdamState::new(t.dims())).collect();
        Self {
            params,
            adam,
            iter: 0,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        let params = ck.params.cast();
        let adam = match &ck.adam {
            Some(states) => states
                .iter()
                .map(|s| AdamState {
                    m: s.m.cast(),
                    v: s.v.cast(),
                    t: s.t,
                })
                .collect(),
            None => params.tensors().iter().map(|t| AdamState::new(t.dims())).collect(),
        };
        let iter = ck.adam.as_ref().and_then(|s| s.first()).map_or(0, |s| s.t as usize);
        Self { params, adam, iter }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.cast(),
            adam: Some(
                self.adam
                    .iter()
                    .map(|s| AdamState {
                        m: s.m.cast(),
                        v: s.v.cast(),
                        t: s.t,
                    })
                    .collect(),
            ),
        }
    }
}

/// Forward, loss and backward of one sample.
pub struct SampleGrad<T> {
    pub grads: Vec<Tensor<T>>,
    pub sites: Vec<Option<f64>>,
    pub total: f64,
}

fn non_finite(iter: usize, term: impl Into<String>) -> impl FnOnce(Error) -> Error {
    let term = term.into();
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            iter,
            term: format!("{term} ({op})"),
        },
        // raised inside a named layer; keep the name, fill in the iteration
        Error::NonFiniteLoss { term: inner, .. } => Error::NonFiniteLoss {
            iter,
            term: format!("{term}: {inner}"),
        },
        other => other,
    }
}

/// Gradient of the weighted site loss for one sample.
pub fn sample_gradient<T: Real>(
    net: &Network,
    params: &NetworkParams<T>,
    sample: &TrainSample,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<SampleGrad<T>> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, params, true)?;
    let inputs = sample.inputs::<T>(&cfg.norm)?;
    let vars: ForwardVars = net
        .forward(&mut g, &bound, &inputs)
        .map_err(non_finite(iter, "forward"))?;
    let names = site_names(net);
    let sites = vars.sites();
    let (loss, values) = loss_graph(&mut g, &sites, &sample.targets, &cfg.lambdas).map_err(|e| {
        // name the first site whose value breaks down
        let bad = sites
            .iter()
            .position(|&s| !g.value(s).is_finite())
            .map_or("loss".to_string(), |i| names[i].clone());
        non_finite(iter, bad)(e)
    })?;
    if let Some(i) = values.iter().position(|v| v.is_some_and(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss {
            iter,
            term: names[i].clone(),
        });
    }
    let total = g.value(loss).data()[0].as_f64();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter,
            term: "total".into(),
        });
    }
    g.backward(loss).map_err(|e| non_finite(iter, "backward")(e.into()))?;
    let grads = bound
        .vars()
        .iter()
        .map(|&v| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.dims(v))))
        .collect();
    Ok(SampleGrad {
        grads,
        sites: values,
        total,
    })
}

/// Deterministic epoch-wise shuffled batches.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            // Fisher-Yates
            for i in (1..self.order.len()).rev() {
                let j = self.rng.random_range(0..=i);
                self.order.swap(i, j);
            }
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

fn slot_rng(seed: u64, iter: usize, slot: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    r.set_stream(((iter as u64) << 20) | slot as u64);
    r
}

/// Runs `cfg.total_iters` iterations from `state`, calling `on_checkpoint` every
/// `cfg.checkpoint_every` iterations. Returns the loss trace.
pub fn train_loop<T: Real>(
    net: &Network,
    dataset: &[TrainSample],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    mut on_checkpoint: impl FnMut(usize, &TrainState<T>) -> Result<()>,
) -> Result<Vec<TraceRow>> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    cfg.validate(net.config().site_count())?;
    state.params.check_layout(net.config())?;
    let mut sampler = BatchSampler::new(dataset.len(), cfg.seed);
    // replay the batch order of iterations already completed
    for _ in 0..state.iter * cfg.batch_size {
        sampler.next();
    }
    let mut trace = Vec::with_capacity(cfg.total_iters);
    let start = state.iter;
    for iter in start..start + cfg.total_iters {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.next()).collect();
        let results = picks
            .par_iter()
            .enumerate()
            .map(|(slot, &k)| {
                let mut rng = slot_rng(cfg.seed, iter, slot);
                let sample = augment_flip(&dataset[k], cfg.flip_prob, &mut rng);
                sample_gradient(net, &state.params, &sample, cfg, iter)
            })
            .collect::<Vec<_>>();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / cfg.batch_size as f64;
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (a, b) in grads.iter_mut().zip(&r.grads) {
                a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x = *x + *y);
            }
        }
        let mut scale = inv;
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.iter().map(|t| t.dot(t).unwrap_or(0.0)).sum::<f64>().sqrt() * inv;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        let s = T::of(scale);
        for t in &mut grads {
            t.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
        let lr = lr_at(iter, cfg);
        for ((p, gr), st) in state.params.tensors_mut().iter_mut().zip(&grads).zip(&mut state.adam) {
            cfg.adam.step(p, gr, st, lr)?;
        }
        let sites = (0..results[0].sites.len())
            .map(|i| {
                let v: Vec<f64> = results.iter().filter_map(|r| r.sites[i]).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let total = results.iter().map(|r| r.total).sum::<f64>() * inv;
        trace.push(TraceRow {
            iter,
            lr,
            sites,
            total,
        });
        state.iter = iter + 1;
        if cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0 {
            on_checkpoint(state.iter, state)?;
        }
    }
    Ok(trace)
}

/// Caps rayon's global pool at `LIDARFLOW_THREADS` when set. Call before any
/// parallel work; later calls are no-ops.
pub fn configure_threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var("LIDARFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("LIDARFLOW_THREADS={v:?} is not a positive integer")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_breakpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert_eq!(lr_at(149_999, &cfg), 1e-3);
        assert_eq!(lr_at(150_000, &cfg), 5e-4);
        assert_eq!(lr_at(209_999, &cfg), 5e-4);
        assert_eq!(lr_at(210_000, &cfg), 2.5e-4);
        assert_eq!(lr_at(270_000, &cfg), 1.25e-4);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, 3);
        for _ in 0..3 {
            let mut epoch: Vec<_> = (0..5).map(|_| s.next()).collect();
            epoch.sort_unstable();
            assert_eq!(epoch, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn mirrored_target_negates_u() {
        let f = FlowField::from_fn(2, 4, |y, x| [x as f32 + 10.0 * y as f32, 1.0]);
        let t = SiteTarget::from_field(&f).mirrored();
        assert_eq!(t.flow.at(0, 0, 0, 0), -3.0);
        assert_eq!(t.flow.at(0, 0, 1, 3), -10.0);
        assert_eq!(t.flow.at(0, 1, 1, 3), 1.0);
    }

    #[test]
    fn total_loss_sums_weighted_sites() {
        let zero = Tensor::<f64>::zeros([1, 2, 2, 2]);
        let mut off = zero.clone();
        off.data_mut()[..4].fill(3.0);
        off.data_mut()[4..].fill(4.0);
        let target = SiteTarget {
            flow: zero.clone(),
            valid: Mask::all(1, 2, 2, true),
        };
        let empty = SiteTarget {
            flow: zero.clone(),
            valid: Mask::all(1, 2, 2, false),
        };
        let t = [target.clone(), target.clone(), empty.clone()];
        let v = total_loss(&[&zero, &off, &off], &t, &[1.0, 2.0, 1.0]).unwrap();
        assert_eq!(v, 10.0);
        let e = [empty.clone(), empty.clone(), empty];
        assert!(matches!(total_loss(&[&zero, &off, &off], &e, &[1.0; 3]), Err(Error::Degenerate(_))));
    }
}
