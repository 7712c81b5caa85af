//! Raster containers, sRGB transfer, convolution and PNG/frame-sequence I/O.
//!
//! Pixels are stored as linear-light `f64`, channel-interleaved and row-major
//! (`data[(y * width + x) * 3 + c]`). sRGB is applied only when reading or
//! writing 8-bit files.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{contract, dimension, Error, Result};

/// Rec.709 luma weights for linear RGB.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Three-channel linear-light raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Ok(Self { width, height, data })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height * 3 {
            return Err(dimension(format!("expected {} samples for {width}x{height}x3, got {}", width * height * 3, data.len())));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(dimension(format!("{what}: {}x{} vs {}x{}", self.width, self.height, other.width, other.height)))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Applies `f` to every sample.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn scaled(&self, k: f64) -> Image {
        self.map(|v| v * k)
    }

    /// Bilinear sample with replicated borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let (x0, x1, fx) = bilinear_taps(x, self.width);
        let (y0, y1, fy) = bilinear_taps(y, self.height);
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * fx;
            let bottom = p01[c] + (p11[c] - p01[c]) * fx;
            out[c] = top + (bottom - top) * fy;
        }
        out
    }

    /// Translates content by `(dx, dy)`: `out(p) = self(p - d)`, bilinear,
    /// replicated borders.
    pub fn translated(&self, dx: f64, dy: f64) -> Image {
        let mut out = self.clone();
        out.data.par_chunks_mut(self.width * 3).enumerate().for_each(|(y, row)| {
            for x in 0..self.width {
                let p = self.sample_bilinear(x as f64 - dx, y as f64 - dy);
                row[x * 3..x * 3 + 3].copy_from_slice(&p);
            }
        });
        out
    }

    pub fn mean_luminance(&self) -> f64 {
        let sum: f64 = self.pixels().map(luma).sum();
        sum / self.pixel_count() as f64
    }
}

/// Single-channel raster; also used as a foreground matte.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self { width, height, data: vec![value; width * height] })
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(dimension(format!("expected {} samples for {width}x{height}, got {}", width * height, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value at a possibly out-of-range integer position, clamped to the edge.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xi = x.clamp(0, self.width as isize - 1) as usize;
        let yi = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yi * self.width + xi]
    }

    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let (x0, x1, fx) = bilinear_taps(x, self.width);
        let (y0, y1, fy) = bilinear_taps(y, self.height);
        let top = self.get(x0, y0) + (self.get(x1, y0) - self.get(x0, y0)) * fx;
        let bottom = self.get(x0, y1) + (self.get(x1, y1) - self.get(x0, y1)) * fx;
        top + (bottom - top) * fy
    }

    pub fn matches(&self, img: &Image) -> bool {
        self.width == img.width() && self.height == img.height()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// How samples outside the raster are synthesized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BorderPolicy {
    /// Repeat the edge pixel.
    #[default]
    Replicate,
    /// Mirror about the edge pixel without repeating it (`-1 -> 1`).
    Reflect,
}

impl BorderPolicy {
    /// Maps an arbitrary integer coordinate into `0..n`.
    #[inline]
    pub fn index(self, i: isize, n: usize) -> usize {
        if i >= 0 && (i as usize) < n {
            return i as usize;
        }
        match self {
            BorderPolicy::Replicate => i.clamp(0, n as isize - 1) as usize,
            BorderPolicy::Reflect => {
                if n == 1 {
                    return 0;
                }
                let period = 2 * (n as isize - 1);
                let m = i.rem_euclid(period);
                if m >= n as isize {
                    (period - m) as usize
                } else {
                    m as usize
                }
            }
        }
    }
}

/// Dense 2-D convolution kernel, anchored at its center.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    width: usize,
    height: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn identity() -> Self {
        Self { width: 1, height: 1, weights: vec![1.0] }
    }

    /// Wraps a row-major weight grid. Only the shape is checked here;
    /// `convolve2d` enforces odd size and unit sum.
    pub fn from_weights(width: usize, height: usize, weights: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if weights.len() != width * height {
            return Err(dimension(format!("kernel {width}x{height} needs {} weights, got {}", width * height, weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(contract("kernel weights must be finite"));
        }
        Ok(Self { width, height, weights })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, x: usize, y: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn transposed(&self) -> BlurKernel {
        let mut weights = vec![0.0; self.weights.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                weights[x * self.height + y] = self.weight(x, y);
            }
        }
        BlurKernel { width: self.height, height: self.width, weights }
    }

    pub fn is_identity(&self) -> bool {
        self.width == 1 && self.height == 1
    }

    /// Plain-text dump: header line `W H`, then one row of weights per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.width, self.height);
        for y in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|x| format!("{:.9}", self.weight(x, y))).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// 8-bit interleaved RGB raster as stored in files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        Err(dimension(format!("raster must be non-empty, got {width}x{height}")))
    } else {
        Ok(())
    }
}

#[inline]
fn bilinear_taps(v: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let v = v.clamp(0.0, max);
    let i0 = v.floor();
    let f = v - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f)
}

#[inline]
pub fn luma(p: [f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2]
}

/// sRGB electro-optical transfer (encoded value to linear light).
#[inline]
pub fn srgb_eotf(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`srgb_eotf`].
#[inline]
pub fn srgb_oetf(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn decode_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [0.0; 256];
        for (i, v) in lut.iter_mut().enumerate() {
            *v = srgb_eotf(i as f64 / 255.0);
        }
        lut
    })
}

pub fn srgb_decode(raster: &Raster8) -> Result<Image> {
    check_dims(raster.width, raster.height)?;
    if raster.data.len() != raster.width * raster.height * 3 {
        return Err(dimension(format!(
            "raster {}x{} needs {} bytes, got {}",
            raster.width,
            raster.height,
            raster.width * raster.height * 3,
            raster.data.len()
        )));
    }
    let lut = decode_lut();
    let data = raster.data.iter().map(|&b| lut[b as usize]).collect();
    Image::from_vec(raster.width, raster.height, data)
}

#[inline]
pub fn encode_byte(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (srgb_oetf(v) * 255.0).round() as u8
}

/// Clamps to `[0, 1]` and applies the sRGB transfer, quantizing to bytes.
pub fn srgb_encode(img: &Image) -> Raster8 {
    Raster8 { width: img.width(), height: img.height(), data: img.data().iter().map(|&v| encode_byte(v)).collect() }
}

pub fn luminance(img: &Image) -> Plane {
    Plane { width: img.width(), height: img.height(), data: img.pixels().map(luma).collect() }
}

/// Convolves each channel with `kernel`:
/// `out(x, y) = sum_{i,j} k(i, j) * img(x - (i - cx), y - (j - cy))`.
pub fn convolve2d(img: &Image, kernel: &BlurKernel, border: BorderPolicy) -> Result<Image> {
    if kernel.width % 2 == 0 || kernel.height % 2 == 0 {
        return Err(contract(format!("kernel dimensions must be odd, got {}x{}", kernel.width, kernel.height)));
    }
    let sum = kernel.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(contract(format!("kernel must sum to 1, sums to {sum}")));
    }
    if kernel.is_identity() {
        return Ok(img.clone());
    }

    let (w, h) = (img.width(), img.height());
    let cx = (kernel.width / 2) as isize;
    let cy = (kernel.height / 2) as isize;
    // Skip zero taps; line kernels are mostly empty.
    let taps: Vec<(isize, isize, f64)> = (0..kernel.height)
        .flat_map(|j| (0..kernel.width).map(move |i| (i, j)))
        .filter_map(|(i, j)| {
            let k = kernel.weight(i, j);
            (k != 0.0).then_some((cx - i as isize, cy - j as isize, k))
        })
        .collect();

    let src = img.data();
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for &(ox, oy, k) in &taps {
                let sx = border.index(x as isize + ox, w);
                let sy = border.index(y as isize + oy, h);
                let s = (sy * w + sx) * 3;
                acc[0] += k * src[s];
                acc[1] += k * src[s + 1];
                acc[2] += k * src[s + 2];
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&acc);
        }
    });
    Image::from_vec(w, h, out)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| image_error(path, e))?;
    let rgb = dynimg.to_rgb8();
    srgb_decode(&Raster8 { width: rgb.width() as usize, height: rgb.height() as usize, data: rgb.into_raw() })
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    write_raster_png(path, &srgb_encode(img))
}

pub fn write_raster_png(path: &Path, raster: &Raster8) -> Result<()> {
    image::save_buffer(path, &raster.data, raster.width as u32, raster.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| image_error(path, e))
}

/// Writes a plane as 8-bit grayscale, mapping `[0, 1]` linearly to `0..=255`.
pub fn write_gray_png(path: &Path, plane: &Plane) -> Result<()> {
    let bytes: Vec<u8> = plane.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, plane.width() as u32, plane.height() as u32, image::ExtendedColorType::L8).map_err(|e| image_error(path, e))
}

/// Reads an 8-bit grayscale PNG back into `[0, 1]`.
pub fn read_gray_png(path: &Path) -> Result<Plane> {
    let dynimg = image::open(path).map_err(|e| image_error(path, e))?;
    let luma = dynimg.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Plane::from_vec(w, h, luma.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Decode { path: path.to_path_buf(), message: other.to_string() },
    }
}

/// printf-style frame path template such as `frames/frame_%06d.png`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePattern {
    prefix: String,
    suffix: String,
    zero_pad: bool,
    width: usize,
}

impl FramePattern {
    /// Accepts exactly one `%d`, `%Nd` or `%0Nd` directive; `%%` is a literal percent.
    pub fn parse(pattern: &str) -> Result<Self> {
        let mut prefix = String::new();
        let mut suffix = String::new();
        let mut spec: Option<(bool, usize)> = None;
        let mut chars = pattern.chars().peekable();
        while let Some(ch) = chars.next() {
            let target = if spec.is_some() { &mut suffix } else { &mut prefix };
            if ch != '%' {
                target.push(ch);
                continue;
            }
            if chars.peek() == Some(&'%') {
                chars.next();
                target.push('%');
                continue;
            }
            if spec.is_some() {
                return Err(contract(format!("pattern {pattern:?} has more than one directive")));
            }
            let mut digits = String::new();
            while let Some(&d) = chars.peek() {
                if d.is_ascii_digit() {
                    digits.push(d);
                    chars.next();
                } else {
                    break;
                }
            }
            if chars.next() != Some('d') {
                return Err(contract(format!("pattern {pattern:?}: only %d directives are supported")));
            }
            let zero_pad = digits.starts_with('0');
            let width = if digits.is_empty() { 0 } else { digits.parse().unwrap_or(0) };
            spec = Some((zero_pad, width));
        }
        let (zero_pad, width) = spec.ok_or_else(|| contract(format!("pattern {pattern:?} has no %d directive")))?;
        Ok(Self { prefix, suffix, zero_pad, width })
    }

    pub fn format(&self, index: usize) -> String {
        let num = if self.zero_pad { format!("{index:0width$}", width = self.width) } else { format!("{index:width$}", width = self.width) };
        format!("{}{}{}", self.prefix, num, self.suffix)
    }

    pub fn path(&self, index: usize) -> PathBuf {
        PathBuf::from(self.format(index))
    }
}
