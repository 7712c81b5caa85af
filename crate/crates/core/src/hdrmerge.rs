//! Multi-exposure HDR: camera response recovery by regularized least squares,
//! weighted radiance merging, global tone mapping and PFM output.
//!
//! Exposure values are relative stops: an image at `ev` had effective
//! exposure `2^ev`, so a stack at EVs `(-2, 0, +2)` spans a 16x range.
//! Sensor-gain brackets are treated exactly like shutter brackets.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{contract, dimension, Error, Result};
use crate::imagekit::{luma, Image};

pub const CODES: usize = 256;
/// Code whose log exposure is pinned to zero.
pub const PIVOT: usize = 128;
pub const DEFAULT_SAMPLES: usize = 200;
pub const DEFAULT_LAMBDA: f64 = 50.0;
pub const DEFAULT_KEY: f64 = 0.18;
/// Percentile of scaled luminance used as the default white point.
pub const WHITE_PERCENTILE: f64 = 99.5;

/// Registered LDR images with their relative exposure values.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureStack {
    images: Vec<Image>,
    evs: Vec<f64>,
}

impl ExposureStack {
    /// Requires at least two equally sized images and non-decreasing EVs.
    pub fn new(images: Vec<Image>, evs: Vec<f64>) -> Result<Self> {
        if images.len() < 2 {
            return Err(contract(format!("exposure stack needs at least 2 images, got {}", images.len())));
        }
        if images.len() != evs.len() {
            return Err(contract(format!("{} images but {} exposure values", images.len(), evs.len())));
        }
        for img in &images[1..] {
            images[0].ensure_same_dims(img, "exposure stack")?;
        }
        if evs.iter().any(|e| !e.is_finite()) || evs.windows(2).any(|w| w[1] < w[0]) {
            return Err(contract(format!("exposure values must be finite and sorted ascending: {evs:?}")));
        }
        Ok(Self { images, evs })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn evs(&self) -> &[f64] {
        &self.evs
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Same images with every EV shifted by `delta` stops.
    pub fn shifted(&self, delta: f64) -> Self {
        Self { images: self.images.clone(), evs: self.evs.iter().map(|e| e + delta).collect() }
    }

    fn ln_exposure(&self, j: usize) -> f64 {
        self.evs[j] * std::f64::consts::LN_2
    }
}

/// A raw short exposure and its color-compensated counterpart as a
/// two-image bracket.
#[derive(Clone, Debug, PartialEq)]
pub struct CompensationStack {
    pub stack: ExposureStack,
    pub ev_gap: f64,
    /// Set when the two images are (nearly) equally bright.
    pub warning: Option<String>,
}

/// Gaps below this many stops are treated as no gap.
const DEGENERATE_GAP: f64 = 1e-3;

/// `[raw at -ev_gap, compensated at 0]`. Without an explicit gap it is
/// estimated as `log2(mean Y(compensated) / mean Y(raw))`.
pub fn build_stack_from_compensation(raw: &Image, compensated: &Image, ev_gap: Option<f64>) -> Result<CompensationStack> {
    raw.ensure_same_dims(compensated, "compensation stack")?;
    let (gap, warning) = match ev_gap {
        Some(g) if g > 0.0 && g.is_finite() => (g, None),
        Some(g) => return Err(contract(format!("ev_gap must be positive, got {g}"))),
        None => {
            let lr = raw.mean_luminance();
            if !(lr > 0.0) {
                return Err(contract("raw frame has zero luminance; cannot estimate the exposure gap"));
            }
            let gap = (compensated.mean_luminance() / lr).log2();
            if gap.abs() < DEGENERATE_GAP {
                (0.0, Some(format!("raw and compensated frames differ by {gap:.2e} stops; HDR stack is degenerate")))
            } else if gap < 0.0 {
                return Err(contract(format!("compensated frame is {:.2} stops darker than raw", -gap)));
            } else {
                (gap, None)
            }
        }
    };
    let stack = ExposureStack::new(vec![raw.clone(), compensated.clone()], vec![-gap, 0.0])?;
    Ok(CompensationStack { stack, ev_gap: gap, warning })
}

/// Hat weighting `min(z, 255 - z)`: zero at both ends, 127 at codes 127 and 128.
#[inline]
pub fn hat_weight(z: u8) -> f64 {
    let z = z as f64;
    z.min(255.0 - z)
}

/// 8-bit code of a linear sample in `[0, 1]`.
#[inline]
pub fn pixel_code(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Log-exposure per code and channel: `g(z) = ln E + ln dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseCurve {
    g: [[f64; CODES]; 3],
}

impl ResponseCurve {
    /// Response of a linear camera, `g(z) = ln(z / 128)`; code 0 is treated
    /// as half a code.
    pub fn linear() -> Self {
        let mut g = [[0.0; CODES]; 3];
        for ch in g.iter_mut() {
            for (z, v) in ch.iter_mut().enumerate() {
                *v = ((z as f64).max(0.5) / PIVOT as f64).ln();
            }
        }
        Self { g }
    }

    pub fn from_tables(g: [[f64; CODES]; 3]) -> Result<Self> {
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(contract("response table must be finite"));
        }
        Ok(Self { g })
    }

    #[inline]
    pub fn g(&self, channel: usize, z: u8) -> f64 {
        self.g[channel][z as usize]
    }

    pub fn channel(&self, channel: usize) -> &[f64; CODES] {
        &self.g[channel]
    }

    pub fn is_monotone(&self) -> bool {
        self.g.iter().all(|ch| ch.windows(2).all(|w| w[1] >= w[0]))
    }

    /// Plain-text table: one line per code, `z g_r g_g g_b`.
    pub fn to_text(&self) -> String {
        (0..CODES).map(|z| format!("{z} {:.9} {:.9} {:.9}\n", self.g[0][z], self.g[1][z], self.g[2][z])).collect()
    }
}

/// `n` sample sites on a uniform grid over the frame.
fn sample_sites(width: usize, height: usize, n: usize) -> Vec<(usize, usize)> {
    let aspect = width as f64 / height as f64;
    let nx = ((n as f64 * aspect).sqrt().ceil() as usize).clamp(1, width);
    let ny = n.div_ceil(nx).clamp(1, height);
    let mut sites = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (((i as f64 + 0.5) * width as f64 / nx as f64) as usize).min(width - 1);
            let y = (((j as f64 + 0.5) * height as f64 / ny as f64) as usize).min(height - 1);
            sites.push((x, y));
        }
    }
    sites.truncate(n);
    sites.dedup();
    sites
}

/// Pool-adjacent-violators projection onto non-decreasing sequences.
fn isotonic(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().expect("len > 1") = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks.into_iter().flat_map(|(m, n)| std::iter::repeat_n(m, n)).collect()
}

/// Recovers `g` per channel from `n_samples` grid sites by weighted least
/// squares with second-difference smoothing `lambda` and `g(128) = 0`,
/// followed by an isotonic projection.
pub fn recover_response(stack: &ExposureStack, n_samples: usize, lambda: f64) -> Result<ResponseCurve> {
    let k = stack.len();
    if n_samples * (k - 1) < CODES {
        return Err(contract(format!("response recovery is underdetermined: {n_samples} samples x {} image pairs < {CODES}", k - 1)));
    }
    if stack.evs.first() == stack.evs.last() {
        return Err(contract("response recovery needs at least two distinct exposure values"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(contract(format!("lambda must be non-negative, got {lambda}")));
    }
    let first = &stack.images[0];
    let sites = sample_sites(first.width(), first.height(), n_samples);

    let tables: Vec<[f64; CODES]> = (0..3).into_par_iter().map(|ch| solve_channel(stack, &sites, ch, lambda)).collect::<Result<_>>()?;
    ResponseCurve::from_tables([tables[0], tables[1], tables[2]])
}

fn solve_channel(stack: &ExposureStack, sites: &[(usize, usize)], ch: usize, lambda: f64) -> Result<[f64; CODES]> {
    // Codes per informative site.
    let samples: Vec<Vec<u8>> = sites
        .iter()
        .map(|&(x, y)| stack.images.iter().map(|img| pixel_code(img.pixel(x, y)[ch])).collect::<Vec<u8>>())
        .filter(|codes| codes.iter().any(|&z| hat_weight(z) > 0.0))
        .collect();
    if samples.is_empty() {
        return Err(Error::InsufficientData(format!("channel {ch}: every sample site is clipped in every exposure")));
    }

    // Unknowns: g(z) for z != PIVOT (255 of them), then ln E per site.
    let g_index = |z: usize| -> Option<usize> {
        match z.cmp(&PIVOT) {
            std::cmp::Ordering::Less => Some(z),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(z - 1),
        }
    };
    let n_g = CODES - 1;
    let n = n_g + samples.len();
    let mut ata = DMatrix::<f64>::zeros(n, n);
    let mut atb = DVector::<f64>::zeros(n);
    let mut add_row = |entries: &[(usize, f64)], rhs: f64| {
        for &(i, a) in entries {
            atb[i] += a * rhs;
            for &(j, b) in entries {
                ata[(i, j)] += a * b;
            }
        }
    };

    for (i, codes) in samples.iter().enumerate() {
        for (j, &z) in codes.iter().enumerate() {
            let w = hat_weight(z);
            if w == 0.0 {
                continue;
            }
            let e = (n_g + i, -w);
            match g_index(z as usize) {
                Some(gi) => add_row(&[(gi, w), e], w * stack.ln_exposure(j)),
                None => add_row(&[e], w * stack.ln_exposure(j)),
            }
        }
    }
    for z in 1..CODES - 1 {
        let w = lambda * hat_weight(z as u8);
        let entries: Vec<(usize, f64)> =
            [(z - 1, w), (z, -2.0 * w), (z + 1, w)].into_iter().filter_map(|(zz, c)| g_index(zz).map(|gi| (gi, c))).collect();
        add_row(&entries, 0.0);
    }

    let solution = match ata.clone().cholesky() {
        Some(ch) => ch.solve(&atb),
        None => {
            ata.lu().solve(&atb).ok_or_else(|| Error::Numerical { message: format!("channel {ch}: response system is singular"), iterations: 0 })?
        }
    };
    let mut g = [0.0; CODES];
    for (z, v) in g.iter_mut().enumerate() {
        *v = g_index(z).map_or(0.0, |gi| solution[gi]);
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical { message: format!("channel {ch}: non-finite response"), iterations: 0 });
    }
    let adjusted = g.windows(2).filter(|w| w[1] < w[0]).count();
    if adjusted > 0 {
        log::debug!("channel {ch}: {adjusted} response steps were non-monotone before projection");
    }
    let projected = isotonic(&g);
    let pivot = projected[PIVOT];
    for (dst, src) in g.iter_mut().zip(projected) {
        *dst = src - pivot;
    }
    Ok(g)
}

/// Relative scene radiance; may exceed 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceMap {
    pub image: Image,
}

/// `ln E = sum_j w(z_j) (g(z_j) - ln dt_j) / sum_j w(z_j)`; pixels with no
/// informative exposure use the middle exposure alone.
pub fn merge_radiance(stack: &ExposureStack, response: &ResponseCurve) -> RadianceMap {
    let first = &stack.images[0];
    let mid = stack.len() / 2;
    let ln_dt: Vec<f64> = (0..stack.len()).map(|j| stack.ln_exposure(j)).collect();
    let mut data = vec![0.0; first.data().len()];
    data.par_chunks_mut(3).enumerate().for_each(|(p, out)| {
        for (ch, o) in out.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for (j, img) in stack.images.iter().enumerate() {
                let z = pixel_code(img.data()[p * 3 + ch]);
                let w = hat_weight(z);
                num += w * (response.g(ch, z) - ln_dt[j]);
                den += w;
            }
            let ln_e = if den > 0.0 {
                num / den
            } else {
                let z = pixel_code(stack.images[mid].data()[p * 3 + ch]);
                response.g(ch, z) - ln_dt[mid]
            };
            *o = ln_e.exp();
        }
    });
    RadianceMap { image: Image::from_vec(first.width(), first.height(), data).expect("stack dims") }
}

fn scaled_luminance(radiance: &RadianceMap, key: f64) -> Vec<f64> {
    let lum: Vec<f64> = radiance.image.pixels().map(luma).collect();
    let logs: Vec<f64> = lum.iter().filter(|&&l| l > 0.0).map(|l| l.ln()).collect();
    if logs.is_empty() {
        return lum;
    }
    let avg = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    lum.iter().map(|l| key * l / avg).collect()
}

/// Default white point: the 99.5th percentile of key-scaled luminance.
pub fn default_white(radiance: &RadianceMap, key: f64) -> f64 {
    let mut ls = scaled_luminance(radiance, key);
    ls.sort_by(f64::total_cmp);
    let rank = (WHITE_PERCENTILE / 100.0 * (ls.len() - 1) as f64).round() as usize;
    let white = ls[rank.min(ls.len() - 1)];
    if white > 0.0 {
        white
    } else {
        1.0
    }
}

/// Global photographic operator: luminance normalized by its log-average to
/// `key`, compressed as `L (1 + L / white^2) / (1 + L)`, color carried by the
/// per-pixel ratio. Output is clamped to `[0, 1]`.
pub fn tone_map(radiance: &RadianceMap, key: f64, white: f64) -> Result<Image> {
    if !(key > 0.0 && white > 0.0) {
        return Err(contract(format!("key and white must be positive, got {key} and {white}")));
    }
    let ls = scaled_luminance(radiance, key);
    let lum: Vec<f64> = radiance.image.pixels().map(luma).collect();
    let w2 = white * white;
    let mut out = radiance.image.clone();
    out.data_mut().par_chunks_mut(3).enumerate().for_each(|(i, p)| {
        let (l, lw) = (ls[i], lum[i]);
        let ratio = if lw > 0.0 { l * (1.0 + l / w2) / (1.0 + l) / lw } else { 0.0 };
        for v in p.iter_mut() {
            *v = (*v * ratio).clamp(0.0, 1.0);
        }
    });
    Ok(out)
}

/// PFM bytes: `PF\n`, `W H\n`, `-1.0\n`, then little-endian `f32` RGB
/// rows from the bottom row up.
pub fn encode_pfm(img: &Image) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut bytes = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    bytes.reserve(w * h * 12);
    for y in (0..h).rev() {
        for x in 0..w {
            for v in img.pixel(x, y) {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    bytes
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode_pfm(img)).map_err(io)
}

/// Parses color PFM data of either endianness.
pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| dimension(format!("malformed PFM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    pos += 1; // single whitespace byte after the scale
    if fields[0] != "PF" {
        return Err(bad("only 3-channel PF files are supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("scale"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("missing data"))?;
    if body.len() != w * h * 12 {
        return Err(bad("pixel data has the wrong length"));
    }
    let mut data = vec![0.0; w * h * 3];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, rest) = (i / (w * 3), i % (w * 3));
        let y = h - 1 - row;
        data[y * w * 3 + rest] = v as f64;
    }
    Image::from_vec(w, h, data)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    decode_pfm(&bytes)
}
