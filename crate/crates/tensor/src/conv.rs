//! Convolution kernels on plain tensors. Both directions lower to GEMM over an
//! im2col buffer; the transposed convolution is the exact adjoint of the forward one.

use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tensor::{Dims, Tensor};

/// Per-side zero padding. Asymmetric values are allowed on both axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding::new(0, 0, 0, 0);

    pub const fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Self {
            top,
            bottom,
            left,
            right,
        }
    }

    pub const fn uniform(p: usize) -> Self {
        Self::new(p, p, p, p)
    }

    pub const fn vertical(&self) -> usize {
        self.top + self.bottom
    }

    pub const fn horizontal(&self) -> usize {
        self.left + self.right
    }
}

/// Stride and padding of a (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: Padding,
}

impl ConvSpec {
    pub const fn new(stride: (usize, usize), pad: Padding) -> Self {
        Self { stride, pad }
    }

    pub const fn unit(pad: Padding) -> Self {
        Self::new((1, 1), pad)
    }
}

/// Output extent of a convolution along one axis, or the (non-positive) size it would have.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> i64 {
    let span = input as i64 + pad as i64 - kernel as i64;
    span.div_euclid(stride as i64) + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> i64 {
    (input as i64 - 1) * stride as i64 + kernel as i64 - pad as i64
}

/// Relation between an image of `c×h×w` and its column matrix of
/// `(c·kh·kw) × (oh·ow)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sy: usize,
    sx: usize,
    pt: usize,
    pl: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(img: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.sy + ky) as isize - g.pt as isize;
                    let seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.sx + kx) as isize - g.pl as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, img: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.sy + ky) as isize - g.pt as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.sx + kx) as isize - g.pl as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(shape_err(
            op,
            format!("bias has {} values, expected {channels}", b.len()),
        )),
        _ => Ok(()),
    }
}

fn positive(op: &'static str, axis: &'static str, size: i64) -> Result<usize> {
    if size < 1 {
        Err(TensorError::Geometry { op, axis, size })
    } else {
        Ok(size as usize)
    }
}

pub(crate) fn conv_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<(Geom, Dims)> {
    const OP: &str = "conv2d";
    let xd = x.dims();
    let wd = w.dims();
    if wd.channels != xd.channels {
        return Err(shape_err(
            OP,
            format!(
                "weight expects {} input channels, input has {}",
                wd.channels, xd.channels
            ),
        ));
    }
    if spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(TensorError::InvalidArgument("zero stride".into()));
    }
    check_bias(OP, bias, wd.batch)?;
    let oh = positive(
        OP,
        "height",
        conv_out_len(xd.height, wd.height, spec.stride.0, spec.pad.vertical()),
    )?;
    let ow = positive(
        OP,
        "width",
        conv_out_len(xd.width, wd.width, spec.stride.1, spec.pad.horizontal()),
    )?;
    let g = Geom {
        c: xd.channels,
        h: xd.height,
        w: xd.width,
        kh: wd.height,
        kw: wd.width,
        sy: spec.stride.0,
        sx: spec.stride.1,
        pt: spec.pad.top,
        pl: spec.pad.left,
        oh,
        ow,
    };
    Ok((g, Dims::new(xd.batch, wd.batch, oh, ow)))
}

pub(crate) fn deconv_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<(Geom, Dims)> {
    const OP: &str = "deconv2d";
    let xd = x.dims();
    let wd = w.dims();
    if wd.batch != xd.channels {
        return Err(shape_err(
            OP,
            format!(
                "weight expects {} input channels, input has {}",
                wd.batch, xd.channels
            ),
        ));
    }
    if spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(TensorError::InvalidArgument("zero stride".into()));
    }
    check_bias(OP, bias, wd.channels)?;
    let oh = positive(
        OP,
        "height",
        deconv_out_len(xd.height, wd.height, spec.stride.0, spec.pad.vertical()),
    )?;
    let ow = positive(
        OP,
        "width",
        deconv_out_len(xd.width, wd.width, spec.stride.1, spec.pad.horizontal()),
    )?;
    // The forward map scatters each input site into the output canvas, so the
    // column matrix is indexed by the input grid.
    let g = Geom {
        c: wd.channels,
        h: oh,
        w: ow,
        kh: wd.height,
        kw: wd.width,
        sy: spec.stride.0,
        sx: spec.stride.1,
        pt: spec.pad.top,
        pl: spec.pad.left,
        oh: xd.height,
        ow: xd.width,
    };
    Ok((g, Dims::new(xd.batch, wd.channels, oh, ow)))
}

fn add_bias<T: Real>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let d = out.dims();
    let plane = d.plane();
    for b in 0..d.batch {
        for (c, chunk) in out.item_mut(b).chunks_exact_mut(plane).enumerate() {
            let v = bias.data()[c];
            chunk.iter_mut().for_each(|o| *o = *o + v);
        }
    }
}

fn bias_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let d = dy.dims();
    let mut g = vec![T::zero(); d.channels];
    for b in 0..d.batch {
        for (c, chunk) in dy.item(b).chunks_exact(d.plane()).enumerate() {
            g[c] = g[c] + chunk.iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec([d.channels, 1, 1, 1], g).expect("bias length")
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let (g, od) = conv_geom(x, w, bias, spec)?;
    let (k, p, cout) = (g.rows(), g.cols(), od.channels);
    let mut out = Tensor::zeros(od);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..od.batch {
        im2col(x.item(b), &g, &mut cols);
        T::gemm(
            cout,
            k,
            p,
            T::one(),
            w.data(),
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            T::zero(),
            out.item_mut(b),
            p as isize,
            1,
        );
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias);
    }
    Ok(out)
}

/// Gradients of a convolution with respect to (input, weight, bias).
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (g, od) = conv_geom(x, w, None, spec)?;
    if dy.dims() != od {
        return Err(shape_err("conv2d backward", "gradient dims mismatch"));
    }
    let (k, p, cout) = (g.rows(), g.cols(), od.channels);
    let mut dw = Tensor::zeros(w.dims());
    let mut dx = need_input.then(|| Tensor::zeros(x.dims()));
    let mut cols = vec![T::zero(); k * p];
    for b in 0..od.batch {
        im2col(x.item(b), &g, &mut cols);
        // dW += dY (cout×p) · colsᵀ (p×k)
        T::gemm(
            cout,
            p,
            k,
            T::one(),
            dy.item(b),
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            dw.data_mut(),
            k as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ (k×cout) · dY (cout×p)
            T::gemm(
                k,
                cout,
                p,
                T::one(),
                w.data(),
                1,
                k as isize,
                dy.item(b),
                p as isize,
                1,
                T::zero(),
                &mut cols,
                p as isize,
                1,
            );
            col2im(&cols, &g, dx.item_mut(b));
        }
    }
    Ok((dx, dw, bias_grad(dy)))
}

pub fn deconv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let (g, od) = deconv_geom(x, w, bias, spec)?;
    let (k, p, cin) = (g.rows(), g.cols(), x.dims().channels);
    let mut out = Tensor::zeros(od);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..od.batch {
        // cols = Wᵀ (k×cin) · X (cin×p)
        T::gemm(
            k,
            cin,
            p,
            T::one(),
            w.data(),
            1,
            k as isize,
            x.item(b),
            p as isize,
            1,
            T::zero(),
            &mut cols,
            p as isize,
            1,
        );
        col2im(&cols, &g, out.item_mut(b));
    }
    if let Some(bias) = bias {
        add_bias(&mut out, bias);
    }
    Ok(out)
}

/// Gradients of a transposed convolution with respect to (input, weight, bias).
pub fn deconv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
    dy: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (g, od) = deconv_geom(x, w, None, spec)?;
    if dy.dims() != od {
        return Err(shape_err("deconv2d backward", "gradient dims mismatch"));
    }
    let (k, p, cin) = (g.rows(), g.cols(), x.dims().channels);
    let mut dw = Tensor::zeros(w.dims());
    let mut dx = need_input.then(|| Tensor::zeros(x.dims()));
    let mut cols = vec![T::zero(); k * p];
    for b in 0..od.batch {
        im2col(dy.item(b), &g, &mut cols);
        // dW += X (cin×p) · dcolsᵀ (p×k)
        T::gemm(
            cin,
            p,
            k,
            T::one(),
            x.item(b),
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            dw.data_mut(),
            k as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dX = W (cin×k) · dcols (k×p)
            T::gemm(
                cin,
                k,
                p,
                T::one(),
                w.data(),
                k as isize,
                1,
                &cols,
                p as isize,
                1,
                T::zero(),
                dx.item_mut(b),
                p as isize,
                1,
            );
        }
    }
    Ok((dx, dw, bias_grad(dy)))
}
