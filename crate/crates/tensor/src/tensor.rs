use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;

/// Extents of a 4-D tensor in (batch, channels, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    #[inline]
    pub const fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }
}

impl From<[usize; 4]> for Dims {
    fn from(d: [usize; 4]) -> Self {
        Dims::new(d[0], d[1], d[2], d[3])
    }
}

/// Row-major dense 4-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: impl Into<Dims>) -> Self {
        let dims = dims.into();
        Self {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn full(dims: impl Into<Dims>, value: T) -> Self {
        let dims = dims.into();
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: impl Into<Dims>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if data.len() != dims.len() {
            return Err(shape_err(
                "tensor",
                format!("{} values for dims {:?}", data.len(), dims.as_array()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: impl Into<Dims>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let dims = dims.into();
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..dims.batch {
            for c in 0..dims.channels {
                for y in 0..dims.height {
                    for x in 0..dims.width {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: Dims::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.dims.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.dims.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous slice holding every channel of batch item `b`.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.dims.channels * self.dims.plane();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.dims.channels * self.dims.plane();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(shape_err(
                "dot",
                format!("{:?} vs {:?}", self.dims.as_array(), other.dims.as_array()),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    /// Mirror every plane left-right (column `x` ↔ `width-1-x`).
    pub fn flip_horizontal(&self) -> Self {
        let Dims { width, .. } = self.dims;
        let mut out = self.clone();
        for (src, dst) in self
            .data
            .chunks_exact(width.max(1))
            .zip(out.data.chunks_exact_mut(width.max(1)))
        {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

/// Per-pixel validity over (batch, height, width), shared by all channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn all(batch: usize, height: usize, width: usize, value: bool) -> Self {
        Self {
            batch,
            height,
            width,
            data: vec![value; batch * height * width],
        }
    }

    pub fn from_vec(batch: usize, height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(shape_err(
                "mask",
                format!("{} flags for {batch}x{height}x{width}", data.len()),
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> bool {
        self.data[(b * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, v: bool) {
        let i = (b * self.height + y) * self.width + x;
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        let w = self.width.max(1);
        for (src, dst) in self.data.chunks_exact(w).zip(out.data.chunks_exact_mut(w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }

    pub(crate) fn matches<T: Real>(&self, dims: Dims) -> bool {
        self.batch == dims.batch && self.height == dims.height && self.width == dims.width
    }
}
