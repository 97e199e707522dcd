//! Dense flow fields and their interchange formats: Middlebury `.flo`, KITTI 16-bit
//! PNG, and the color-wheel rendering written as PPM or PNG.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::Path;

use lidarflow_tensor::{Dims, Mask, Real, Tensor};

use crate::error::{Error, Result};

/// Per-pixel (u, v) displacement in pixels, u rightward and v downward.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Interleaved (u, v), row-major.
    data: Vec<f32>,
    /// `None` means every pixel is valid.
    valid: Option<Vec<bool>>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 2 * height * width],
            valid: None,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 2]) -> Self {
        let mut data = Vec::with_capacity(2 * height * width);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
            valid: None,
        }
    }

    pub fn from_parts(height: usize, width: usize, data: Vec<f32>, valid: Option<Vec<bool>>) -> Result<Self> {
        let n = height * width;
        if data.len() != 2 * n || valid.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::Shape(format!(
                "flow field {height}x{width} needs {} values",
                2 * n
            )));
        }
        let f = Self {
            height,
            width,
            data,
            valid,
        };
        if let Some((y, x)) = f.first_non_finite() {
            return Err(Error::Format(format!("non-finite flow at ({y},{x})")));
        }
        Ok(f)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 2] {
        let i = 2 * (y * self.width + x);
        [self.data[i], self.data[i + 1]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, uv: [f32; 2]) {
        let i = 2 * (y * self.width + x);
        self.data[i] = uv[0];
        self.data[i + 1] = uv[1];
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid
            .as_ref()
            .is_none_or(|v| v[y * self.width + x])
    }

    pub fn has_holes(&self) -> bool {
        self.valid.as_ref().is_some_and(|v| v.iter().any(|b| !b))
    }

    pub fn validity(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    /// Validity as a dense vector (all true when no mask is attached).
    pub fn valid_vec(&self) -> Vec<bool> {
        self.valid
            .clone()
            .unwrap_or_else(|| vec![true; self.height * self.width])
    }

    pub fn with_validity(mut self, valid: Option<Vec<bool>>) -> Result<Self> {
        if valid.as_ref().is_some_and(|v| v.len() != self.height * self.width) {
            return Err(Error::Shape("validity length differs from field".into()));
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn set_valid(&mut self, y: usize, x: usize, v: bool) {
        let n = self.height * self.width;
        let w = self.width;
        self.valid.get_or_insert_with(|| vec![true; n])[y * w + x] = v;
    }

    pub fn mask(&self) -> Mask {
        Mask::from_vec(1, self.height, self.width, self.valid_vec()).expect("mask dims")
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        (0..self.height * self.width)
            .find(|&i| {
                let (y, x) = (i / self.width, i % self.width);
                self.is_valid(y, x) && !(self.data[2 * i].is_finite() && self.data[2 * i + 1].is_finite())
            })
            .map(|i| (i / self.width, i % self.width))
    }

    /// 1×2×H×W tensor with u in channel 0 and v in channel 1.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 2, self.height, self.width], |[_, c, y, x]| {
            T::of(self.get(y, x)[c] as f64)
        })
    }

    /// Reads batch item `b` of a two-channel tensor; the result has no validity mask.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, b: usize) -> Result<Self> {
        let d = t.dims();
        if d.channels != 2 || b >= d.batch {
            return Err(Error::Shape(format!(
                "expected a 2-channel tensor, got {:?}",
                d.as_array()
            )));
        }
        Self::from_parts(
            d.height,
            d.width,
            (0..d.plane())
                .flat_map(|i| {
                    let (y, x) = (i / d.width, i % d.width);
                    [t.at(b, 0, y, x).as_f64() as f32, t.at(b, 1, y, x).as_f64() as f32]
                })
                .collect(),
            None,
        )
    }

    /// Left-right mirror with the u component negated.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let [u, v] = self.get(y, self.width - 1 - x);
                out.set(y, x, [-u, v]);
            }
        }
        if let Some(valid) = &self.valid {
            let mut m = valid.clone();
            for (dst, src) in m.chunks_exact_mut(self.width).zip(valid.chunks_exact(self.width)) {
                dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
            }
            out.valid = Some(m);
        }
        out
    }
}

/// Tag that opens every `.flo` file ("PIEH" when viewed as bytes).
pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo(field: &FlowField) -> Result<Vec<u8>> {
    if field.has_holes() {
        return Err(Error::Encode(".flo cannot store invalid pixels".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * field.data.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(field.width as i32).to_le_bytes());
    out.extend_from_slice(&(field.height as i32).to_le_bytes());
    for v in &field.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::Format(format!(".flo header truncated at {} bytes", bytes.len())));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {magic}")));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width < 0 || height < 0 {
        return Err(Error::Format(format!("negative .flo size {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = 12 + 8 * width * height;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            ".flo truncated: header says {width}x{height} ({expected} bytes), file has {}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FlowField::from_parts(height, width, data, None)
}

pub fn write_flo(path: impl AsRef<Path>, field: &FlowField) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_flo(field)?).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    decode_flo(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

const KITTI_SCALE: f64 = 64.0;
const KITTI_OFFSET: f64 = 32768.0;
/// Exclusive bound on |u| and |v| representable by the KITTI encoding.
pub const KITTI_MAX_FLOW: f64 = 512.0;

fn kitti_word(v: f32) -> Result<u16> {
    if !(v.abs() as f64).lt(&KITTI_MAX_FLOW) {
        return Err(Error::Encode(format!("flow component {v} outside ±512")));
    }
    Ok((v as f64 * KITTI_SCALE + KITTI_OFFSET).round() as u16)
}

/// KITTI stores three 16-bit channels per pixel: u, v (both `64·x + 2¹⁵`) and validity.
pub fn kitti_words(field: &FlowField) -> Result<Vec<[u16; 3]>> {
    let mut out = Vec::with_capacity(field.height * field.width);
    for y in 0..field.height {
        for x in 0..field.width {
            if field.is_valid(y, x) {
                let [u, v] = field.get(y, x);
                out.push([kitti_word(u)?, kitti_word(v)?, 1]);
            } else {
                out.push([0, 0, 0]);
            }
        }
    }
    Ok(out)
}

pub fn encode_kitti_png(field: &FlowField) -> Result<Vec<u8>> {
    let words = kitti_words(field)?;
    let mut raw = Vec::with_capacity(words.len() * 6);
    for w in &words {
        for c in w {
            raw.extend_from_slice(&c.to_be_bytes());
        }
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, field.width as u32, field.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Encode(e.to_string()))?;
    writer
        .write_image_data(&raw)
        .map_err(|e| Error::Encode(e.to_string()))?;
    writer.finish().map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out)
}

pub fn decode_kitti_png(bytes: &[u8]) -> Result<FlowField> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Rgb {
        return Err(Error::Format(format!(
            "KITTI flow must be 16-bit RGB, got {:?} {:?}",
            info.bit_depth, info.color_type
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h * 6)];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * w * h);
    let mut valid = Vec::with_capacity(w * h);
    for px in buf[..w * h * 6].chunks_exact(6) {
        let c = |i: usize| u16::from_be_bytes([px[2 * i], px[2 * i + 1]]);
        let ok = c(2) > 0;
        valid.push(ok);
        for i in 0..2 {
            let v = if ok {
                (c(i) as f64 - KITTI_OFFSET) / KITTI_SCALE
            } else {
                0.0
            };
            data.push(v as f32);
        }
    }
    FlowField::from_parts(h, w, data, Some(valid))
}

/// Reads `.flo` or KITTI `.png` by extension.
pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("flo") => read_flo(path),
        Some("png") => read_kitti_png(path),
        _ => Err(Error::Format(format!(
            "{}: expected a .flo or .png flow file",
            path.display()
        ))),
    }
}

pub fn write_kitti_png(path: impl AsRef<Path>, field: &FlowField) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_kitti_png(field)?).map_err(|e| Error::io(path, e))
}

pub fn read_kitti_png(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    decode_kitti_png(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Encode(e.to_string()))?;
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_image_data(&raw)
            .map_err(|e| Error::Encode(e.to_string()))?;
        w.finish().map_err(|e| Error::Encode(e.to_string()))?;
        Ok(())
    }
}

/// Reads an 8-bit grayscale PNG as a boolean mask (nonzero = set).
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!(
            "{}: mask must be 8-bit grayscale",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; w * h];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((h, w, buf.iter().map(|v| *v > 0).collect()))
}

pub fn write_mask_png(path: impl AsRef<Path>, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Encode(e.to_string()))?;
    let raw: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    w.write_image_data(&raw)
        .map_err(|e| Error::Encode(e.to_string()))?;
    w.finish().map_err(|e| Error::Encode(e.to_string()))?;
    Ok(())
}

// Middlebury color wheel segment lengths.
const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

/// The 55-entry Middlebury wheel. Entry 0 is pure red.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    let ramp = |i: usize, n: usize| (255 * i / n) as f64;
    for i in 0..RY {
        wheel.push([255.0, ramp(i, RY), 0.0]);
    }
    for i in 0..YG {
        wheel.push([255.0 - ramp(i, YG), 255.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 255.0, ramp(i, GC)]);
    }
    for i in 0..CB {
        wheel.push([0.0, 255.0 - ramp(i, CB), 255.0]);
    }
    for i in 0..BM {
        wheel.push([ramp(i, BM), 0.0, 255.0]);
    }
    for i in 0..MR {
        wheel.push([255.0, 0.0, 255.0 - ramp(i, MR)]);
    }
    wheel
}

/// Fractional wheel index in `[0, ncols-1]` for a flow direction. A rightward
/// vector maps to the red end of the wheel; opposite vectors sit half a turn apart.
pub fn wheel_position(u: f64, v: f64, ncols: usize) -> f64 {
    let a = (-v).atan2(-u) / PI;
    (a + 1.0) / 2.0 * (ncols - 1) as f64
}

fn flow_color(nu: f64, nv: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    let n = wheel.len();
    let rad = nu.hypot(nv);
    let fk = wheel_position(nu, nv, n);
    let k0 = fk.floor() as usize % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    let mut px = [0u8; 3];
    for (i, p) in px.iter_mut().enumerate() {
        let c0 = wheel[k0][i] / 255.0;
        let c1 = wheel[k1][i] / 255.0;
        let mut col = (1.0 - f) * c0 + f * c1;
        if rad <= 1.0 {
            col = 1.0 - rad * (1.0 - col);
        } else {
            col *= 0.75;
        }
        *p = (255.0 * col).floor() as u8;
    }
    px
}

/// 99th-percentile flow magnitude over valid pixels (1 when there is no motion).
pub fn robust_max_magnitude(field: &FlowField) -> f64 {
    let mut mags: Vec<f64> = (0..field.height)
        .flat_map(|y| (0..field.width).map(move |x| (y, x)))
        .filter(|&(y, x)| field.is_valid(y, x))
        .map(|(y, x)| {
            let [u, v] = field.get(y, x);
            (u as f64).hypot(v as f64)
        })
        .collect();
    if mags.is_empty() {
        return 1.0;
    }
    mags.sort_by(f64::total_cmp);
    let idx = ((mags.len() - 1) as f64 * 0.99).round() as usize;
    let m = mags[idx];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Renders flow on the Middlebury wheel: hue from direction, saturation from
/// magnitude relative to `max_mag` (saturating at 1). Invalid pixels are black.
pub fn flow_to_color(field: &FlowField, max_mag: Option<f64>) -> Result<RgbImage> {
    let max_mag = match max_mag {
        Some(m) if !(m > 0.0) => {
            return Err(Error::Config(format!("max magnitude {m} must be positive")))
        }
        Some(m) => m,
        None => robust_max_magnitude(field),
    };
    let wheel = color_wheel();
    let mut pixels = Vec::with_capacity(field.height * field.width);
    for y in 0..field.height {
        for x in 0..field.width {
            if !field.is_valid(y, x) {
                pixels.push([0, 0, 0]);
                continue;
            }
            let [u, v] = field.get(y, x);
            pixels.push(flow_color(u as f64 / max_mag, v as f64 / max_mag, &wheel));
        }
    }
    Ok(RgbImage {
        width: field.width,
        height: field.height,
        pixels,
    })
}

impl From<&FlowField> for Dims {
    fn from(f: &FlowField) -> Self {
        Dims::new(1, 2, f.height, f.width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flo_golden_bytes() {
        let f = FlowField::from_fn(1, 1, |_, _| [1.5, -2.0]);
        let bytes = encode_flo(&f).unwrap();
        let expected: [u8; 20] = [
            0x50, 0x49, 0x45, 0x48, // "PIEH" == 202021.25f32
            0x01, 0x00, 0x00, 0x00, // width
            0x01, 0x00, 0x00, 0x00, // height
            0x00, 0x00, 0xC0, 0x3F, // 1.5
            0x00, 0x00, 0x00, 0xC0, // -2.0
        ];
        assert_eq!(bytes, expected);
        assert_eq!(decode_flo(&bytes).unwrap(), f);
    }

    #[test]
    fn flo_rejects_bad_magic_and_truncation() {
        let mut bytes = encode_flo(&FlowField::zeros(2, 3)).unwrap();
        assert!(decode_flo(&bytes[..bytes.len() - 1]).is_err());
        bytes[..4].copy_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(decode_flo(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn flo_refuses_holes() {
        let mut f = FlowField::zeros(2, 2);
        f.set_valid(0, 1, false);
        assert!(matches!(encode_flo(&f), Err(Error::Encode(_))));
    }

    #[test]
    fn kitti_words_known_values() {
        let mut f = FlowField::from_fn(1, 3, |_, x| [[1.0, 0.0], [0.0, 0.0], [-1.5, 2.25]][x]);
        f.set_valid(0, 2, true);
        let w = kitti_words(&f).unwrap();
        assert_eq!(w[0][0], 32832);
        assert_eq!(w[1], [32768, 32768, 1]);
        assert_eq!(w[2], [32672, 32912, 1]);
    }

    #[test]
    fn kitti_rejects_out_of_range() {
        let f = FlowField::from_fn(1, 1, |_, _| [512.0, 0.0]);
        assert!(matches!(encode_kitti_png(&f), Err(Error::Encode(_))));
    }

    #[test]
    fn kitti_rejects_8bit_png() {
        let img = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![[1, 2, 3]; 2],
        };
        let dir = std::env::temp_dir().join(format!("lf-kitti8-{}", std::process::id()));
        img.write_png(&dir).unwrap();
        assert!(matches!(read_kitti_png(&dir), Err(Error::Format(_))));
        let _ = fs::remove_file(dir);
    }

    #[test]
    fn zero_flow_is_white_and_invalid_is_black() {
        let mut f = FlowField::zeros(1, 2);
        f.set_valid(0, 1, false);
        let img = flow_to_color(&f, Some(1.0)).unwrap();
        assert_eq!(img.pixels, vec![[255, 255, 255], [0, 0, 0]]);
    }

    #[test]
    fn rightward_flow_is_red() {
        let f = FlowField::from_fn(1, 1, |_, _| [1.0, 0.0]);
        let img = flow_to_color(&f, Some(1.0)).unwrap();
        assert_eq!(img.pixels[0], [255, 0, 0]);
    }

    #[test]
    fn opposite_vectors_half_a_turn_apart() {
        let n = color_wheel().len();
        let half = (n - 1) as f64 / 2.0;
        for (u, v) in [(3.0, 0.0), (0.5, 1.0), (-2.0, 0.7), (1.0, -4.0)] {
            let a = wheel_position(u, v, n);
            let b = wheel_position(-u, -v, n);
            let d = (a - b).abs();
            assert!((d - half).abs() < 1e-9, "{u},{v}: {a} vs {b}");
        }
        let f = FlowField::from_fn(1, 2, |_, x| if x == 0 { [2.0, 0.0] } else { [-2.0, 0.0] });
        let img = flow_to_color(&f, Some(2.0)).unwrap();
        assert_ne!(img.pixels[0], img.pixels[1]);
    }

    #[test]
    fn ppm_header() {
        let img = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![[1, 2, 3], [4, 5, 6]],
        };
        assert_eq!(img.to_ppm(), b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06".to_vec());
    }
}
