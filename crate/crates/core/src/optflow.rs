//! Dense two-frame optical flow by polynomial expansion.
//!
//! Every neighbourhood is approximated by a quadratic polynomial
//! `f(x) ~ x^T A x + b^T x + c` fitted with Gaussian applicability. A pure
//! translation `d` maps `(A, b)` to `(A, b - 2 A d)`, so the displacement is
//! recovered from the change in `b`, pooled over a window and refined
//! coarse-to-fine over a Gaussian pyramid.

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;

use crate::error::{contract, dimension, Result};
use crate::imagekit::{luminance, Image, Plane, Raster8};
use crate::trackctl::BoundingBox;

/// Per-pixel displacement `(dx, dy)` in pixels; pixel `p` of the first frame
/// moves to `p + flow(p)` in the second. `x` grows right, `y` grows down.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::constant(width, height, [0.0, 0.0])
    }

    pub fn constant(width: usize, height: usize, v: [f64; 2]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(dimension("flow field must be non-empty"));
        }
        Ok(Self { width, height, data: vec![v; width * height] })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Result<Self> {
        let mut field = Self::zeros(width, height)?;
        for y in 0..height {
            for x in 0..width {
                field.data[y * width + x] = f(x, y);
            }
        }
        Ok(field)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v[0].is_finite() && v[1].is_finite())
    }

    fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 2] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.get(x0, y0)[c] * (1.0 - fx) + self.get(x1, y0)[c] * fx;
            let bottom = self.get(x0, y1)[c] * (1.0 - fx) + self.get(x1, y1)[c] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Magnitudes of all vectors.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|v| v[0].hypot(v[1])).collect()
    }
}

/// Pyramid and polynomial-expansion settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    /// Side of the square pooling window, odd.
    pub window: usize,
    pub iterations: usize,
    /// Side of the polynomial fitting window, odd and at least 5.
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { pyramid_levels: 3, pyramid_scale: 0.5, window: 15, iterations: 3, poly_n: 7, poly_sigma: 1.5 }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(contract(format!("pyramid_scale must be in (0, 1), got {}", self.pyramid_scale)));
        }
        if self.window % 2 == 0 {
            return Err(contract(format!("window must be odd, got {}", self.window)));
        }
        if self.poly_n % 2 == 0 || self.poly_n < 5 {
            return Err(contract(format!("poly_n must be odd and >= 5, got {}", self.poly_n)));
        }
        if !(self.poly_sigma > 0.0) {
            return Err(contract(format!("poly_sigma must be positive, got {}", self.poly_sigma)));
        }
        if self.pyramid_levels == 0 || self.iterations == 0 {
            return Err(contract("pyramid_levels and iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Quadratic-fit coefficients per pixel, relative to the pixel position:
/// `f(p + d) ~ c + b.d + d^T A d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyCoeffs {
    width: usize,
    height: usize,
    /// `[c, bx, by, axx, ayy, axy]`, where `axy` multiplies `dx * dy`.
    data: Vec<[f64; 6]>,
}

impl PolyCoeffs {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Symmetric `A` as `[a11, a22, a12]`.
    #[inline]
    pub fn a(&self, x: usize, y: usize) -> [f64; 3] {
        let r = &self.data[y * self.width + x];
        [r[3], r[4], r[5] * 0.5]
    }

    #[inline]
    pub fn b(&self, x: usize, y: usize) -> [f64; 2] {
        let r = &self.data[y * self.width + x];
        [r[1], r[2]]
    }

    #[inline]
    pub fn c(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x][0]
    }

    fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 6] {
        let (x0, x1, fx) = taps(x, self.width);
        let (y0, y1, fy) = taps(y, self.height);
        let at = |xx: usize, yy: usize| &self.data[yy * self.width + xx];
        let mut out = [0.0; 6];
        for (k, o) in out.iter_mut().enumerate() {
            let top = at(x0, y0)[k] * (1.0 - fx) + at(x1, y0)[k] * fx;
            let bottom = at(x0, y1)[k] * (1.0 - fx) + at(x1, y1)[k] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }
}

fn taps(v: f64, n: usize) -> (usize, usize, f64) {
    let v = v.clamp(0.0, (n - 1) as f64);
    let i0 = v.floor() as usize;
    (i0, (i0 + 1).min(n - 1), v - i0 as f64)
}

/// Weighted least-squares quadratic fit in a `poly_n x poly_n` window with
/// separable Gaussian applicability of width `poly_sigma`. Samples outside
/// the image replicate the edge.
pub fn poly_expansion(img: &Plane, poly_n: usize, poly_sigma: f64) -> Result<PolyCoeffs> {
    if poly_n % 2 == 0 || !(poly_sigma > 0.0) {
        return Err(contract(format!("poly_n must be odd and poly_sigma positive (got {poly_n}, {poly_sigma})")));
    }
    let (w, h) = (img.width(), img.height());
    if w < poly_n || h < poly_n {
        return Err(contract(format!("image {w}x{h} is smaller than the {poly_n}px polynomial window")));
    }
    let n = (poly_n / 2) as isize;
    let g: Vec<f64> = (-n..=n).map(|i| (-((i * i) as f64) / (2.0 * poly_sigma * poly_sigma)).exp()).collect();

    // Gram matrix of the basis [1, x, y, x^2, y^2, xy] under the applicability.
    let mut gram = SMatrix::<f64, 6, 6>::zeros();
    for (j, dy) in (-n..=n).enumerate() {
        for (i, dx) in (-n..=n).enumerate() {
            let (fx, fy) = (dx as f64, dy as f64);
            let basis = SVector::<f64, 6>::from([1.0, fx, fy, fx * fx, fy * fy, fx * fy]);
            gram += basis * basis.transpose() * (g[i] * g[j]);
        }
    }
    let inv = gram.try_inverse().ok_or_else(|| contract("singular polynomial basis"))?;

    // Vertical pass: correlations with g, g*d, g*d^2.
    let mut vert = vec![[0.0f64; 3]; w * h];
    vert.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            for (k, dy) in (-n..=n).enumerate() {
                let v = img.get_clamped(x as isize, y as isize + dy) * g[k];
                let d = dy as f64;
                out[0] += v;
                out[1] += v * d;
                out[2] += v * d * d;
            }
        }
    });

    let mut data = vec![[0.0f64; 6]; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut moments = [0.0f64; 6];
            for (k, dx) in (-n..=n).enumerate() {
                let xi = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let v = vert[y * w + xi];
                let d = dx as f64;
                let gk = g[k];
                moments[0] += gk * v[0];
                moments[1] += gk * d * v[0];
                moments[2] += gk * v[1];
                moments[3] += gk * d * d * v[0];
                moments[4] += gk * v[2];
                moments[5] += gk * d * v[1];
            }
            let r = inv * SVector::<f64, 6>::from(moments);
            out.copy_from_slice(r.as_slice());
        }
    });
    Ok(PolyCoeffs { width: w, height: h, data })
}

/// Tikhonov weight added to the pooled normal equations, pulling
/// textureless pixels towards the flow from the previous pass.
pub const FLOW_REGULARIZATION: f64 = 1e-6;

fn gaussian_blur(src: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return src.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / s).collect();
    let (w, h) = (src.width(), src.height());
    let horiz =
        Plane::from_fn(w, h, |x, y| (-r..=r).zip(&k).map(|(d, kk)| kk * src.get_clamped(x as isize + d, y as isize)).sum()).expect("non-empty");
    Plane::from_fn(w, h, |x, y| (-r..=r).zip(&k).map(|(d, kk)| kk * horiz.get_clamped(x as isize, y as isize + d)).sum()).expect("non-empty")
}

fn resize(src: &Plane, w: usize, h: usize) -> Plane {
    let sx = src.width() as f64 / w as f64;
    let sy = src.height() as f64 / h as f64;
    Plane::from_fn(w, h, |x, y| src.sample_bilinear((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)).expect("non-empty")
}

/// Levels from finest (index 0) to coarsest. Levels too small for the
/// polynomial window are dropped.
fn pyramid(img: &Plane, params: &FlowParams) -> Vec<Plane> {
    let mut levels = vec![img.clone()];
    let min_side = params.poly_n.max(params.window / 2 + 1).max(8);
    for k in 1..params.pyramid_levels {
        let scale = params.pyramid_scale.powi(k as i32);
        let w = (img.width() as f64 * scale).round() as usize;
        let h = (img.height() as f64 * scale).round() as usize;
        if w < min_side || h < min_side {
            break;
        }
        let sigma = (1.0 / scale - 1.0) * 0.5;
        levels.push(resize(&gaussian_blur(img, sigma), w, h));
    }
    levels
}

/// Separable Gaussian-weighted mean (sigma = 0.3 x radius, truncated at the
/// window) of each of the five pooled channels.
fn window_pool(src: &[[f64; 5]], w: usize, h: usize, radius: usize) -> Vec<[f64; 5]> {
    let r = radius as isize;
    let sigma = (radius as f64 * 0.3).max(0.5);
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let kernel: Vec<f64> = raw.iter().map(|k| k / total).collect();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut horiz = vec![[0.0f64; 5]; w * h];
    horiz.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            for (d, k) in (-r..=r).zip(&kernel) {
                let s = &src[y * w + clamp(x as isize + d, w)];
                for c in 0..5 {
                    out[c] += k * s[c];
                }
            }
        }
    });
    let mut out = vec![[0.0f64; 5]; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            for (d, k) in (-r..=r).zip(&kernel) {
                let s = &horiz[clamp(y as isize + d, h) * w + x];
                for c in 0..5 {
                    o[c] += k * s[c];
                }
            }
        }
    });
    out
}

/// One refinement pass at a single pyramid level.
fn refine(r1: &PolyCoeffs, r2: &PolyCoeffs, flow: &FlowField, window: usize) -> FlowField {
    let (w, h) = (r1.width, r1.height);
    let mut terms = vec![[0.0f64; 5]; w * h];
    terms.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let d = flow.get(x, y);
            let (tx, ty) = (x as f64 + d[0], y as f64 + d[1]);
            if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64 {
                continue;
            }
            let p1 = &r1.data[y * w + x];
            let p2 = r2.sample_bilinear(tx, ty);
            let a11 = 0.5 * (p1[3] + p2[3]);
            let a22 = 0.5 * (p1[4] + p2[4]);
            let a12 = 0.25 * (p1[5] + p2[5]);
            let db1 = -0.5 * (p2[1] - p1[1]) + a11 * d[0] + a12 * d[1];
            let db2 = -0.5 * (p2[2] - p1[2]) + a12 * d[0] + a22 * d[1];
            // A^T A and A^T db for symmetric A.
            *out = [a11 * a11 + a12 * a12, a12 * (a11 + a22), a12 * a12 + a22 * a22, a11 * db1 + a12 * db2, a12 * db1 + a22 * db2];
        }
    });
    let pooled = window_pool(&terms, w, h, window / 2);
    let eps = FLOW_REGULARIZATION;
    let mut data = vec![[0.0f64; 2]; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let [g11, g12, g22, h1, h2] = pooled[y * w + x];
            let prior = flow.get(x, y);
            let (g11, g22) = (g11 + eps, g22 + eps);
            let (h1, h2) = (h1 + eps * prior[0], h2 + eps * prior[1]);
            let det = g11 * g22 - g12 * g12;
            *out = [(g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det];
        }
    });
    FlowField { width: w, height: h, data }
}

fn upsample_flow(flow: &FlowField, w: usize, h: usize) -> FlowField {
    let sx = flow.width as f64 / w as f64;
    let sy = flow.height as f64 / h as f64;
    FlowField::from_fn(w, h, |x, y| {
        let v = flow.sample_bilinear((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
        [v[0] / sx, v[1] / sy]
    })
    .expect("non-empty")
}

/// Flow on luminance planes.
pub fn farneback_flow_planes(prev: &Plane, next: &Plane, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(dimension(format!("flow frames differ in size: {}x{} vs {}x{}", prev.width(), prev.height(), next.width(), next.height())));
    }
    let p1 = pyramid(prev, params);
    let p2 = pyramid(next, params);
    let mut flow: Option<FlowField> = None;
    for (l1, l2) in p1.iter().zip(&p2).rev() {
        let (w, h) = (l1.width(), l1.height());
        let mut current = match flow {
            Some(f) => upsample_flow(&f, w, h),
            None => FlowField::zeros(w, h)?,
        };
        let r1 = poly_expansion(l1, params.poly_n, params.poly_sigma)?;
        let r2 = poly_expansion(l2, params.poly_n, params.poly_sigma)?;
        for _ in 0..params.iterations {
            current = refine(&r1, &r2, &current, params.window);
        }
        flow = Some(current);
    }
    Ok(flow.expect("at least one level"))
}

/// Dense flow from `prev` to `next`, computed on luminance.
pub fn farneback_flow(prev: &Image, next: &Image, params: &FlowParams) -> Result<FlowField> {
    prev.ensure_same_dims(next, "farneback_flow")?;
    farneback_flow_planes(&luminance(prev), &luminance(next), params)
}

/// Region over which flow vectors are averaged.
#[derive(Clone, Copy, Debug)]
pub enum Region<'a> {
    /// Soft or hard mask; each pixel weighted by its mask value.
    Mask(&'a Plane),
    /// Each pixel weighted by the area of its unit cell inside the box.
    Box(BoundingBox),
}

fn region_weights(region: Region<'_>, w: usize, h: usize) -> Result<Vec<f64>> {
    match region {
        Region::Mask(m) => {
            if m.width() != w || m.height() != h {
                return Err(dimension("mask does not match the flow field"));
            }
            Ok(m.data().iter().map(|v| v.max(0.0)).collect())
        }
        Region::Box(b) => {
            let mut weights = vec![0.0; w * h];
            for y in 0..h {
                let oy = (b.y + b.h).min(y as f64 + 1.0) - b.y.max(y as f64);
                if oy <= 0.0 {
                    continue;
                }
                for x in 0..w {
                    let ox = (b.x + b.w).min(x as f64 + 1.0) - b.x.max(x as f64);
                    if ox > 0.0 {
                        weights[y * w + x] = ox * oy;
                    }
                }
            }
            Ok(weights)
        }
    }
}

/// Weighted mean flow over the region.
pub fn mean_flow(flow: &FlowField, region: Region<'_>) -> Result<[f64; 2]> {
    let weights = region_weights(region, flow.width, flow.height)?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(contract("mean_flow region does not overlap the field"));
    }
    let mut acc = [0.0; 2];
    for (v, wgt) in flow.data.iter().zip(&weights) {
        acc[0] += wgt * v[0];
        acc[1] += wgt * v[1];
    }
    Ok([acc[0] / total, acc[1] / total])
}

/// Component-wise median over pixels with weight at least one half.
pub fn median_flow(flow: &FlowField, region: Region<'_>) -> Result<[f64; 2]> {
    let weights = region_weights(region, flow.width, flow.height)?;
    let (mut xs, mut ys): (Vec<f64>, Vec<f64>) = flow.data.iter().zip(&weights).filter(|(_, w)| **w >= 0.5).map(|(v, _)| (v[0], v[1])).unzip();
    if xs.is_empty() {
        return Err(contract("median_flow region does not overlap the field"));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    Ok([median(&mut xs), median(&mut ys)])
}

/// HSV flow coding: hue from direction, saturation from magnitude relative
/// to the largest vector, full value.
pub fn visualize_flow(flow: &FlowField) -> Raster8 {
    let max = flow.magnitudes().into_iter().fold(0.0, f64::max);
    let mut data = Vec::with_capacity(flow.data.len() * 3);
    for v in &flow.data {
        let mag = v[0].hypot(v[1]);
        let sat = if max > 0.0 { mag / max } else { 0.0 };
        let hue = v[1].atan2(v[0]).to_degrees().rem_euclid(360.0);
        let rgb = hsv_to_rgb(hue, sat, 1.0);
        data.extend(rgb.iter().map(|c| (c * 255.0).round() as u8));
    }
    Raster8 { width: flow.width, height: flow.height, data }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}
