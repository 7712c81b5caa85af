//! Motion-blur synthesis: line kernels from tracked motion, the intensity
//! balance between layers, masked compositing
//! `I = (1 - M) * sigma * L_b + M * L_e`, and the panning-shot,
//! cinemagraph and global-blur renderers built on them.

use rayon::prelude::*;

use crate::error::{contract, dimension, Result};
use crate::imagekit::{convolve2d, luma, BorderPolicy, Image, Plane};
use crate::layersep::Mask;
use crate::synthgen::accumulate_frames;
use crate::trackctl::TrackResult;

pub use crate::imagekit::BlurKernel;

/// Positions closer than this to an integer are snapped, so axis-aligned
/// lines do not pick up round-off taps.
const SNAP: f64 = 1e-9;

/// Anti-aliased line segment of `length` pixels through the kernel center.
///
/// `n = round(length)` samples spaced `length / n` apart (unit steps for
/// integer lengths) are splatted bilinearly and the grid is normalized.
/// Lengths below one pixel give the identity kernel.
pub fn line_kernel(length: f64, angle: f64) -> BlurKernel {
    if !(length.is_finite() && angle.is_finite()) || length < 1.0 {
        return BlurKernel::identity();
    }
    let n = length.round().max(1.0) as usize;
    let step = length / n as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    let snap = |v: f64| if (v - v.round()).abs() < SNAP { v.round() } else { v };
    let samples: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let t = (k as f64 - (n as f64 - 1.0) / 2.0) * step;
            (snap(t * dx), snap(t * dy))
        })
        .collect();
    let rx = samples.iter().map(|s| s.0.abs().ceil()).fold(0.0, f64::max) as usize;
    let ry = samples.iter().map(|s| s.1.abs().ceil()).fold(0.0, f64::max) as usize;
    let (w, h) = (2 * rx + 1, 2 * ry + 1);
    let mut weights = vec![0.0; w * h];
    let mut splat = |x: f64, y: f64, wgt: f64| {
        if wgt > 0.0 {
            let xi = (x + rx as f64) as usize;
            let yi = (y + ry as f64) as usize;
            weights[yi * w + xi] += wgt;
        }
    };
    for &(x, y) in &samples {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        splat(x0, y0, (1.0 - fx) * (1.0 - fy));
        splat(x0 + 1.0, y0, fx * (1.0 - fy));
        splat(x0, y0 + 1.0, (1.0 - fx) * fy);
        splat(x0 + 1.0, y0 + 1.0, fx * fy);
    }
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= sum);
    BlurKernel::from_weights(w, h, weights).expect("odd non-empty grid")
}

/// Blur length for a per-frame motion: `blur_scale * |motion|`.
pub fn blur_length(motion: [f64; 2], blur_scale: f64) -> f64 {
    blur_scale * motion[0].hypot(motion[1])
}

/// Kernel along the inverse of `motion`, scaled by `blur_scale`.
pub fn motion_kernel(motion: [f64; 2], blur_scale: f64) -> BlurKernel {
    let inverse = [-motion[0], -motion[1]];
    line_kernel(blur_length(inverse, blur_scale), inverse[1].atan2(inverse[0]))
}

/// Intensity balance between the original frame and the background layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeParams {
    pub sigma: f64,
}

pub const SIGMA_RANGE: [f64; 2] = [0.5, 2.0];

/// `sigma = mean Y(frame) / mean Y(background)` over pixels with `mask < 0.5`,
/// clamped to `[0.5, 2]`.
pub fn compute_sigma(frame: &Image, background: &Image, mask: &Mask) -> Result<CompositeParams> {
    frame.ensure_same_dims(background, "compute_sigma")?;
    if !mask.matches(frame) {
        return Err(dimension("compute_sigma: mask does not match frame"));
    }
    let (mut num, mut den, mut n) = (0.0, 0.0, 0usize);
    for (i, (f, b)) in frame.pixels().zip(background.pixels()).enumerate() {
        if mask.data()[i] < 0.5 {
            num += luma(f);
            den += luma(b);
            n += 1;
        }
    }
    if n == 0 {
        return Err(contract("compute_sigma: no background pixels (mask covers the frame)"));
    }
    let sigma = if den > f64::EPSILON * n as f64 {
        num / den
    } else if num > f64::EPSILON * n as f64 {
        SIGMA_RANGE[1]
    } else {
        1.0
    };
    Ok(CompositeParams { sigma: sigma.clamp(SIGMA_RANGE[0], SIGMA_RANGE[1]) })
}

/// `I = (1 - M) * sigma * L_b + M * L_e`, per pixel in linear light.
pub fn composite(effect: &Image, background: &Image, mask: &Mask, params: CompositeParams) -> Result<Image> {
    effect.ensure_same_dims(background, "composite")?;
    if !mask.matches(effect) {
        return Err(dimension("composite: mask does not match layers"));
    }
    if !(params.sigma.is_finite() && params.sigma > 0.0) {
        return Err(contract(format!("sigma must be positive and finite, got {}", params.sigma)));
    }
    let s = params.sigma;
    let mut out = effect.clone();
    out.data_mut().par_chunks_mut(3).zip(background.data().par_chunks(3)).zip(mask.data().par_iter()).for_each(|((e, b), &m)| {
        if m >= 1.0 {
            return;
        }
        for c in 0..3 {
            e[c] = (1.0 - m) * s * b[c] + m * e[c];
        }
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EffectMode {
    /// Blur the background against the tracked motion; keep the subject sharp.
    #[default]
    PanningShot,
    /// Freeze and blur the background; only the subject changes.
    Cinemagraph,
    /// Blur the whole frame along the tracked motion.
    GlobalBlur,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectConfig {
    pub mode: EffectMode,
    pub blur_scale: f64,
    pub tau: f64,
    pub feather: usize,
    /// Re-center every output frame on the frame-0 box center.
    pub fix_anchor: bool,
}

impl Default for EffectConfig {
    fn default() -> Self {
        Self {
            mode: EffectMode::PanningShot,
            blur_scale: 1.0,
            tau: crate::layersep::DEFAULT_TAU,
            feather: crate::layersep::DEFAULT_FEATHER,
            fix_anchor: false,
        }
    }
}

/// Motion associated with frame `t` (the last frame reuses the last pair).
pub fn frame_motion(track: &TrackResult, t: usize) -> [f64; 2] {
    match track.motions.len() {
        0 => [0.0, 0.0],
        n => track.motions[t.min(n - 1)],
    }
}

/// Per-frame output of [`render_effect`].
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    pub kernel: BlurKernel,
    pub sigma: f64,
}

pub fn render_effect(frames: &[Image], masks: &[Mask], backgrounds: &[Image], track: &TrackResult, cfg: &EffectConfig) -> Result<Vec<RenderedFrame>> {
    let n = frames.len();
    if n == 0 || masks.len() != n || backgrounds.len() != n || track.boxes.len() != n {
        return Err(contract(format!(
            "render_effect length mismatch: {} frames, {} masks, {} backgrounds, {} boxes",
            n,
            masks.len(),
            backgrounds.len(),
            track.boxes.len()
        )));
    }
    if !(cfg.blur_scale >= 0.0 && cfg.blur_scale.is_finite()) {
        return Err(contract(format!("blur_scale must be >= 0, got {}", cfg.blur_scale)));
    }

    let frozen = match cfg.mode {
        EffectMode::Cinemagraph => {
            let kernel = motion_kernel(track.mean_motion(), cfg.blur_scale);
            let mean_bg = accumulate_frames(backgrounds)?;
            Some((convolve2d(&mean_bg, &kernel, BorderPolicy::Replicate)?, mean_bg, kernel))
        }
        _ => None,
    };

    let anchor = track.boxes[0].center();
    (0..n)
        .into_par_iter()
        .map(|t| {
            let frame = &frames[t];
            let (image, kernel, sigma) = match cfg.mode {
                EffectMode::PanningShot => {
                    let kernel = motion_kernel(frame_motion(track, t), cfg.blur_scale);
                    let blurred = convolve2d(&backgrounds[t], &kernel, BorderPolicy::Replicate)?;
                    let params = compute_sigma(frame, &backgrounds[t], &masks[t])?;
                    (composite(frame, &blurred, &masks[t], params)?, kernel, params.sigma)
                }
                EffectMode::Cinemagraph => {
                    let (blurred, mean_bg, kernel) = frozen.as_ref().expect("computed above");
                    let params = compute_sigma(frame, mean_bg, &masks[t])?;
                    (composite(frame, blurred, &masks[t], params)?, kernel.clone(), params.sigma)
                }
                EffectMode::GlobalBlur => {
                    let kernel = motion_kernel(frame_motion(track, t), cfg.blur_scale);
                    (convolve2d(frame, &kernel, BorderPolicy::Replicate)?, kernel, 1.0)
                }
            };
            let image = if cfg.fix_anchor {
                let c = track.boxes[t].center();
                image.translated(anchor[0] - c[0], anchor[1] - c[1])
            } else {
                image
            };
            Ok(RenderedFrame { image, kernel, sigma })
        })
        .collect()
}

/// Sum of squared horizontal differences over pixels where `include` is set.
pub fn horizontal_gradient_energy(img: &Image, include: &Plane) -> f64 {
    let mut e = 0.0;
    for y in 0..img.height() {
        for x in 0..img.width().saturating_sub(1) {
            if include.get(x, y) > 0.5 && include.get(x + 1, y) > 0.5 {
                let (a, b) = (img.pixel(x, y), img.pixel(x + 1, y));
                e += (0..3).map(|c| (b[c] - a[c]).powi(2)).sum::<f64>();
            }
        }
    }
    e
}
