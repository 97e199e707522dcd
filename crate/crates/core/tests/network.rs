mod common;

use common::*;
use lidarflow::lidar::{GridSpec, InputNorm, RangeImage};
use lidarflow::network::*;
use lidarflow::tensor::{Real, Tensor};
use lidarflow::training::{sample_gradient, total_loss, TrainConfig, TrainSample};
use rand::RngExt;

fn inputs<T: Real>(a: &RangeImage, b: &RangeImage) -> NetworkInputs<T> {
    NetworkInputs::from_range_images(a, b, &InputNorm::default()).unwrap()
}

fn hw2(t: &Tensor<impl Real>) -> (usize, usize, usize) {
    let d = t.dims();
    (d.height, d.width, d.channels)
}

#[test]
fn paper_shape_contract() {
    let net = Network::new(NetworkConfig::paper()).unwrap();
    let s = net.shapes();
    assert_eq!(s.y_lidar, (32, 192, 2));
    assert_eq!(s.lidar_preds[0], (2, 12, 2));
    assert_eq!((s.sub_block_a.0, s.sub_block_a.1), (32, 153));
    assert_eq!(s.up_preds, vec![(64, 306, 2), (128, 612, 2)]);
    assert_eq!(s.y_up, (128, 612, 2));
    assert_eq!(s.refine_preds, vec![(128, 612, 2); 5]);
    assert_eq!(s.y_end, (128, 612, 2));
    assert_eq!(s.final_flow, (256, 1224, 2));
    assert_eq!(s.sites, 12);
    let widths: Vec<_> = net.geometry().dt_stages.iter().map(|st| st.output.1).collect();
    assert_eq!(widths, width_schedule(192, 153, 3));
}

/// Runs each desk-scale config and compares every produced shape with the closed form.
#[test]
fn desk_shape_contracts() {
    let configs = [
        (GridSpec::desk(), 16),
        (GridSpec::new(32, 128, 64, 256), 8),
        (GridSpec::new(64, 64, 128, 96), 4),
    ];
    for (spec, base) in configs {
        let net = Network::new(NetworkConfig::new(spec, base)).unwrap();
        let p = net.init_params::<f32>(1).unwrap();
        let mut r = rng(2);
        let a = random_range_image(spec.rows, spec.cols, &mut r);
        let b = random_range_image(spec.rows, spec.cols, &mut r);
        let out = net.full_forward(&p, &inputs(&a, &b)).unwrap();
        let (n, m, h, w) = (spec.rows, spec.cols, spec.height, spec.width);
        let lidar: Vec<_> = out.lidar_preds.iter().map(hw2).collect();
        let expect: Vec<_> = (1..=5).rev().map(|l| (n >> l, m >> l, 2)).collect();
        assert_eq!(lidar, expect, "{spec:?}");
        let up: Vec<_> = out.up_preds.iter().map(hw2).collect();
        assert_eq!(up, vec![(h / 4, w / 4, 2), (h / 2, w / 2, 2)]);
        assert!(out.refine_preds.iter().all(|t| hw2(t) == (h / 2, w / 2, 2)));
        assert_eq!(out.refine_preds.len(), 5);
        assert_eq!(hw2(&out.final_flow), (h, w, 2));
        assert_eq!(out.sites().len(), 12);
        assert_eq!(net.geometry().dt_output(), (h / 8, w / 8));
        let s = net.shapes();
        assert_eq!(s.lidar_preds, lidar);
        assert_eq!(s.up_preds, up);
        assert_eq!(s.final_flow, (h, w, 2));
        assert_eq!(p.scalar_count(), param_count(net.config()));
        let enumerated: usize = net.layout().iter().map(|s| s.dims.len()).sum();
        assert_eq!(enumerated, param_count(net.config()));
    }
}

#[test]
fn zero_inputs_and_biases_give_zero_predictions() {
    let net = desk_net();
    let mut p = net.init_params::<f64>(3).unwrap();
    for (name, t) in p.names().to_vec().iter().zip(p.tensors_mut()) {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let s = net.config().spec;
    let z = RangeImage::empty(s.rows, s.cols);
    let out = net.full_forward(&p, &inputs(&z, &z)).unwrap();
    assert!(out.sites().iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
    assert!(out.final_flow.data().iter().all(|v| *v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let net = desk_net();
    let mut r = rng(5);
    let s = net.config().spec;
    let a = random_range_image(s.rows, s.cols, &mut r);
    let b = random_range_image(s.rows, s.cols, &mut r);
    let o1 = net.full_forward(&net.init_params::<f32>(9).unwrap(), &inputs(&a, &b)).unwrap();
    let o2 = net.full_forward(&net.init_params::<f32>(9).unwrap(), &inputs(&a, &b)).unwrap();
    assert_eq!(o1, o2);
    let o3 = net.full_forward(&net.init_params::<f32>(10).unwrap(), &inputs(&a, &b)).unwrap();
    assert_ne!(o1.final_flow, o3.final_flow);
}

#[test]
fn checkpoint_round_trip_forward_is_bit_identical() {
    let net = desk_net();
    let p = net.init_params::<f32>(4).unwrap();
    let bytes = encode_checkpoint(&Checkpoint { params: p.clone(), adam: None }).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.params, p);
    let sample = synth_sample(&net, 8);
    let x = sample.inputs::<f32>(&InputNorm::default()).unwrap();
    assert_eq!(net.full_forward(&p, &x).unwrap(), net.full_forward(&back.params, &x).unwrap());
}

// -- gradients ------------------------------------------------------------------

fn loss_with<T: Real>(net: &Network, p: &NetworkParams<T>, sample: &TrainSample) -> f64 {
    let out = net.full_forward(p, &sample.inputs::<T>(&InputNorm::default()).unwrap()).unwrap();
    total_loss(&out.sites(), &sample.targets, &[1.0; 12]).unwrap()
}

/// Analytic gradient of the largest-gradient element of each named tensor against
/// a central difference taken in 64-bit.
fn check_gradients<T: Real>(names: &[&str], tol: f64) {
    let net = desk_net();
    let sample = synth_sample(&net, 21);
    let p64 = net.init_params::<f64>(6).unwrap();
    let p: NetworkParams<T> = p64.cast();
    let cfg = TrainConfig::default();
    let grads = sample_gradient(&net, &p, &sample, &cfg, 0).unwrap().grads;
    for name in names {
        let k = p.names().iter().position(|n| n == name).unwrap();
        let g = &grads[k];
        let (j, analytic) = g
            .data()
            .iter()
            .map(|v| v.as_f64())
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        // small step: larger ones straddle leaky-relu kinks on some pixels
        let h = 1e-7;
        let mut plus = p64.clone();
        plus.get_mut(name).unwrap().data_mut()[j] += h;
        let mut minus = p64.clone();
        minus.get_mut(name).unwrap().data_mut()[j] -= h;
        let numeric = (loss_with(&net, &plus, &sample) - loss_with(&net, &minus, &sample)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < tol, "{name}[{j}]: analytic {analytic}, numeric {numeric}, rel {rel}");
    }
}

const SAMPLED: [&str; 6] = [
    "lidar.conv2.w",
    "lidar.pred1.b",
    "up.stage2.wide.w",
    "up.deconv1.b",
    "refine.iter3.conv1.w",
    "refine.iter5.pred.b",
];

#[test]
fn network_gradients_f64() {
    check_gradients::<f64>(&SAMPLED, 1e-4);
}

#[test]
fn network_gradients_f32() {
    check_gradients::<f32>(&SAMPLED, 1e-3);
}

// -- constructed weights ---------------------------------------------------------

/// Horizontal symmetry of one layer: taps t and `center - t` must agree (or be
/// opposite when exactly one side of the channel pair is a u component).
struct LayerSym {
    center: isize,
    /// Input channel holding u, when the input ends with a flow pair.
    in_u: Option<usize>,
    out_u: bool,
}

fn layer_sym(net: &Network, layer: &str, in_ch: usize, kw: usize) -> LayerSym {
    let cfg = net.config();
    let geom = net.geometry();
    let parts: Vec<&str> = layer.split('.').collect();
    let num = |s: &str, prefix: &str| s.strip_prefix(prefix).unwrap().parse::<usize>().unwrap();
    let flow_in = Some(in_ch - 2);
    let k = kw as isize;
    match parts[..] {
        ["lidar", l] if l.starts_with("conv") => {
            // stride 2, pad k/2 on an exactly halving width
            LayerSym { center: 2 * (k / 2) + 1, in_u: None, out_u: false }
        }
        ["lidar", l] if l.starts_with("pred") => LayerSym {
            center: k - 1,
            in_u: (num(l, "pred") < cfg.contraction_levels).then_some(in_ch - 2),
            out_u: true,
        },
        ["lidar", l] if l.starts_with("deconv") => LayerSym {
            center: 3,
            in_u: (num(l, "deconv") + 1 < cfg.contraction_levels).then_some(in_ch - 2),
            out_u: false,
        },
        ["up", st, branch] => {
            let s = num(st, "stage");
            let stage = &geom.dt_stages[s - 1];
            let (pl, pr, first) = if branch == "wide" {
                let (l, r) = match stage.wide_crop {
                    Some((_, left, _, w)) => (left, stage.input.1 - w - left),
                    None => (0, 0),
                };
                (stage.wide_pad.left as isize - l as isize, stage.wide_pad.right as isize - r as isize, true)
            } else {
                let j = num(branch, "narrow");
                let pad = stage.narrow_pads[j - 1];
                (pad.left as isize, pad.right as isize, j == 1)
            };
            LayerSym { center: k - 1 + pl - pr, in_u: (s == 1 && first).then_some(4), out_u: false }
        }
        ["up", d] if d.starts_with("deconv") => LayerSym {
            center: 3,
            in_u: (num(d, "deconv") > 1).then_some(in_ch - 2),
            out_u: false,
        },
        ["up", p] if p.starts_with("pred") => LayerSym { center: k - 1, in_u: None, out_u: true },
        ["refine", _, "conv1"] => LayerSym { center: k - 1, in_u: flow_in, out_u: false },
        ["refine", _, "conv2"] => LayerSym { center: k - 1, in_u: None, out_u: false },
        ["refine", _, "pred"] => LayerSym { center: k - 1, in_u: None, out_u: true },
        _ => panic!("unknown layer {layer}"),
    }
}

/// Weights for which mirroring both frames mirrors every prediction and negates u.
fn symmetric_params(net: &Network, seed: u64) -> NetworkParams<f64> {
    let mut r = rng(seed);
    let mut p = net.init_params::<f64>(seed).unwrap();
    let names = p.names().to_vec();
    for name in names.iter().filter(|n| n.ends_with(".w")) {
        let layer = name.strip_suffix(".w").unwrap();
        let deconv = layer.contains("deconv");
        let w = p.get(name).unwrap().clone();
        let d = w.dims();
        let (cout, cin) = if deconv { (d.channels, d.batch) } else { (d.batch, d.channels) };
        let sym = layer_sym(net, layer, cin, d.width);
        let sign = |o: usize, i: usize| {
            let a = if sym.out_u && o == 0 { -1.0 } else { 1.0 };
            let b = if sym.in_u == Some(i) { -1.0 } else { 1.0 };
            a * b
        };
        let sym_w = Tensor::from_fn(d, |[a, b, y, x]| {
            let (o, i) = if deconv { (b, a) } else { (a, b) };
            let mx = sym.center - x as isize;
            if mx < 0 || mx >= d.width as isize {
                return 0.0;
            }
            0.5 * (w.at(a, b, y, x) + sign(o, i) * w.at(a, b, y, mx as usize))
        });
        *p.get_mut(name).unwrap() = sym_w;
        let bias = p.get_mut(&format!("{layer}.b")).unwrap();
        for o in 0..cout {
            let v = if sym.out_u && o == 0 { 0.0 } else { r.random_range(-0.1..0.1) };
            bias.set(o, 0, 0, 0, v);
        }
    }
    p
}

fn mirror_flow<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut m = t.flip_horizontal();
    let d = m.dims();
    for y in 0..d.height {
        for x in 0..d.width {
            let u = m.at(0, 0, y, x);
            m.set(0, 0, y, x, T::zero() - u);
        }
    }
    m
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, what: &str) {
    assert_eq!(a.dims(), b.dims(), "{what}");
    let scale = a.data().iter().fold(1e-3f64, |m, v| m.max(v.abs()));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-10 * scale, "{what}: {x} vs {y}");
    }
}

#[test]
fn mirror_equivariance_with_symmetric_weights() {
    let configs = [
        (GridSpec::desk(), 16),
        (GridSpec::new(32, 128, 64, 256), 8),
        (GridSpec::new(64, 64, 128, 96), 4),
    ];
    for (spec, base) in configs {
        let net = Network::new(NetworkConfig::new(spec, base)).unwrap();
        let p = symmetric_params(&net, 12);
        let mut r = rng(13);
        let a = random_range_image(spec.rows, spec.cols, &mut r);
        let b = random_range_image(spec.rows, spec.cols, &mut r);
        let out = net.full_forward(&p, &inputs(&a, &b)).unwrap();
        let flipped = net.full_forward(&p, &inputs(&a.mirrored(), &b.mirrored())).unwrap();
        for (k, (x, y)) in out.sites().into_iter().zip(flipped.sites()).enumerate() {
            assert_close(&mirror_flow(x), y, &format!("{spec:?} site {k}"));
        }
        assert_close(&mirror_flow(&out.final_flow), &flipped.final_flow, "final");
        // the construction must not be trivially zero
        assert!(out.final_flow.data().iter().any(|v| v.abs() > 1e-6));
    }
}

/// Refinement weights that pass the incoming flow through every iteration unchanged.
#[test]
fn refinement_identity_construction() {
    let net = desk_net();
    let slope = net.config().leaky_slope;
    let mut p = net.init_params::<f64>(14).unwrap();
    let names = p.names().to_vec();
    for name in names.iter().filter(|n| n.starts_with("refine.")) {
        let t = p.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        if name.ends_with(".b") {
            continue;
        }
        let d = t.dims();
        let c = d.width / 2;
        if name.ends_with("conv1.w") {
            // (u, -u, v, -v) from the flow channels at the end of the input
            let u = d.channels - 2;
            for (o, (i, s)) in [(u, 1.0), (u, -1.0), (u + 1, 1.0), (u + 1, -1.0)].into_iter().enumerate() {
                t.set(o, i, c, c, s);
            }
        } else if name.ends_with("conv2.w") {
            // keep the split-sign pairs: leaky(x) - leaky(-x) = (1 + slope)·x
            for (o, (i, j)) in [(0, 1), (1, 0), (2, 3), (3, 2)].into_iter().enumerate() {
                t.set(o, i, c, c, 1.0);
                t.set(o, j, c, c, -1.0);
            }
        } else {
            let g = 1.0 / (1.0 + slope).powi(2);
            t.set(0, 0, c, c, g);
            t.set(0, 1, c, c, -g);
            t.set(1, 2, c, c, g);
            t.set(1, 3, c, c, -g);
        }
    }
    let sample = synth_sample(&net, 3);
    let out = net.full_forward(&p, &sample.inputs::<f64>(&InputNorm::default()).unwrap()).unwrap();
    let y_up = out.up_preds.last().unwrap();
    assert!(y_up.data().iter().any(|v| v.abs() > 1e-6));
    for pred in &out.refine_preds {
        assert_close(y_up, pred, "refinement");
    }
}
