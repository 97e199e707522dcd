//! Resampling kernels: 2× bilinear upsampling, 2×2 average pooling and cropping.

use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tensor::{Dims, Mask, Tensor};

/// Source taps for one output coordinate of a 2× upsampling axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel (align-corners-false) sample positions: output `i` reads at `(i+0.5)/2-0.5`,
/// clamped to the first and last source sample.
fn taps(n: usize) -> Vec<Tap> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn upsample_bilinear2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.height == 0 || d.width == 0 {
        return Err(TensorError::Geometry {
            op: "bilinear_upsample2x",
            axis: if d.height == 0 { "height" } else { "width" },
            size: 0,
        });
    }
    let (ty, tx) = (taps(d.height), taps(d.width));
    let od = Dims::new(d.batch, d.channels, 2 * d.height, 2 * d.width);
    let mut out = Tensor::zeros(od);
    let n_planes = d.batch * d.channels;
    for p in 0..n_planes {
        let src = &x.data()[p * d.plane()..(p + 1) * d.plane()];
        let dst = &mut out.data_mut()[p * od.plane()..(p + 1) * od.plane()];
        for (oy, ay) in ty.iter().enumerate() {
            let fy = T::of(ay.frac);
            let r0 = &src[ay.lo * d.width..(ay.lo + 1) * d.width];
            let r1 = &src[ay.hi * d.width..(ay.hi + 1) * d.width];
            for (ox, ax) in tx.iter().enumerate() {
                let fx = T::of(ax.frac);
                let top = r0[ax.lo] + (r0[ax.hi] - r0[ax.lo]) * fx;
                let bot = r1[ax.lo] + (r1[ax.hi] - r1[ax.lo]) * fx;
                dst[oy * od.width + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample_bilinear2x_backward<T: Real>(in_dims: Dims, dy: &Tensor<T>) -> Tensor<T> {
    let d = in_dims;
    let od = dy.dims();
    let (ty, tx) = (taps(d.height), taps(d.width));
    let mut dx = Tensor::zeros(d);
    for p in 0..d.batch * d.channels {
        let g = &dy.data()[p * od.plane()..(p + 1) * od.plane()];
        let dst = &mut dx.data_mut()[p * d.plane()..(p + 1) * d.plane()];
        for (oy, ay) in ty.iter().enumerate() {
            let fy = T::of(ay.frac);
            for (ox, ax) in tx.iter().enumerate() {
                let fx = T::of(ax.frac);
                let v = g[oy * od.width + ox];
                let one = T::one();
                dst[ay.lo * d.width + ax.lo] =
                    dst[ay.lo * d.width + ax.lo] + v * (one - fy) * (one - fx);
                dst[ay.lo * d.width + ax.hi] = dst[ay.lo * d.width + ax.hi] + v * (one - fy) * fx;
                dst[ay.hi * d.width + ax.lo] = dst[ay.hi * d.width + ax.lo] + v * fy * (one - fx);
                dst[ay.hi * d.width + ax.hi] = dst[ay.hi * d.width + ax.hi] + v * fy * fx;
            }
        }
    }
    dx
}

/// Per-input-cell pooling weights (`1/valid_count` of its block, or 0) and the output mask.
pub(crate) fn pool_weights(dims: Dims, mask: Option<&Mask>) -> Result<(Vec<f64>, Mask)> {
    if dims.height % 2 != 0 || dims.width % 2 != 0 {
        return Err(TensorError::Geometry {
            op: "avg_pool2x",
            axis: if dims.height % 2 != 0 {
                "height"
            } else {
                "width"
            },
            size: if dims.height % 2 != 0 {
                dims.height as i64
            } else {
                dims.width as i64
            },
        });
    }
    if let Some(m) = mask {
        if !m.matches::<f64>(dims) {
            return Err(shape_err("avg_pool2x", "mask dims differ from input"));
        }
    }
    let (oh, ow) = (dims.height / 2, dims.width / 2);
    let mut weights = vec![0.0; dims.batch * dims.plane()];
    let mut out_mask = Mask::all(dims.batch, oh, ow, false);
    for b in 0..dims.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let cells = [
                    (2 * oy, 2 * ox),
                    (2 * oy, 2 * ox + 1),
                    (2 * oy + 1, 2 * ox),
                    (2 * oy + 1, 2 * ox + 1),
                ];
                let valid = |&(y, x): &(usize, usize)| mask.is_none_or(|m| m.get(b, y, x));
                let n = cells.iter().filter(|c| valid(c)).count();
                if n == 0 {
                    continue;
                }
                out_mask.set(b, oy, ox, true);
                for c in cells.iter().filter(|c| valid(c)) {
                    weights[(b * dims.height + c.0) * dims.width + c.1] = 1.0 / n as f64;
                }
            }
        }
    }
    Ok((weights, out_mask))
}

fn pool_with<T: Real>(x: &Tensor<T>, weights: &[f64]) -> Tensor<T> {
    let d = x.dims();
    let od = Dims::new(d.batch, d.channels, d.height / 2, d.width / 2);
    let mut out = Tensor::zeros(od);
    for b in 0..d.batch {
        let wb = &weights[b * d.plane()..(b + 1) * d.plane()];
        for c in 0..d.channels {
            for y in 0..d.height {
                for xx in 0..d.width {
                    let w = wb[y * d.width + xx];
                    if w != 0.0 {
                        let i = od.index(b, c, y / 2, xx / 2);
                        out.data_mut()[i] = out.data()[i] + x.at(b, c, y, xx) * T::of(w);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn pool_backward<T: Real>(in_dims: Dims, weights: &[f64], dy: &Tensor<T>) -> Tensor<T> {
    let d = in_dims;
    Tensor::from_fn(d, |[b, c, y, x]| {
        let w = weights[(b * d.height + y) * d.width + x];
        if w == 0.0 {
            T::zero()
        } else {
            dy.at(b, c, y / 2, x / 2) * T::of(w)
        }
    })
}

/// 2×2 average pooling. With a mask, each output is the mean of the valid cells of its
/// block and is valid iff at least one of them is; fully invalid blocks hold 0.
pub fn avg_pool2x<T: Real>(x: &Tensor<T>, mask: Option<&Mask>) -> Result<(Tensor<T>, Mask)> {
    let (weights, out_mask) = pool_weights(x.dims(), mask)?;
    Ok((pool_with(x, &weights), out_mask))
}

pub(crate) fn pool_forward<T: Real>(x: &Tensor<T>, weights: &[f64]) -> Tensor<T> {
    pool_with(x, weights)
}

/// Window of `height×width` starting at (`top`, `left`) in every plane.
pub fn crop<T: Real>(
    x: &Tensor<T>,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let d = x.dims();
    if top + height > d.height || left + width > d.width || height == 0 || width == 0 {
        return Err(shape_err(
            "crop",
            format!(
                "window {height}x{width} at ({top},{left}) outside {}x{}",
                d.height, d.width
            ),
        ));
    }
    Ok(Tensor::from_fn(
        Dims::new(d.batch, d.channels, height, width),
        |[b, c, y, xx]| x.at(b, c, y + top, xx + left),
    ))
}

pub(crate) fn crop_backward<T: Real>(
    in_dims: Dims,
    top: usize,
    left: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let od = dy.dims();
    let mut dx = Tensor::zeros(in_dims);
    for b in 0..od.batch {
        for c in 0..od.channels {
            for y in 0..od.height {
                for x in 0..od.width {
                    dx.set(b, c, y + top, x + left, dy.at(b, c, y, x));
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (da, db) = (a.dims(), b.dims());
    if da.batch != db.batch || da.height != db.height || da.width != db.width {
        return Err(shape_err(
            "concat_channels",
            format!("{:?} vs {:?}", da.as_array(), db.as_array()),
        ));
    }
    let od = Dims::new(da.batch, da.channels + db.channels, da.height, da.width);
    let mut data = Vec::with_capacity(od.len());
    for i in 0..da.batch {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    Tensor::from_vec(od, data)
}

pub(crate) fn split_channels<T: Real>(
    dy: &Tensor<T>,
    first: Dims,
    second: Dims,
) -> (Tensor<T>, Tensor<T>) {
    let mut a = Vec::with_capacity(first.len());
    let mut b = Vec::with_capacity(second.len());
    let na = first.channels * first.plane();
    for i in 0..first.batch {
        let item = dy.item(i);
        a.extend_from_slice(&item[..na]);
        b.extend_from_slice(&item[na..]);
    }
    (
        Tensor::from_vec(first, a).expect("split dims"),
        Tensor::from_vec(second, b).expect("split dims"),
    )
}
