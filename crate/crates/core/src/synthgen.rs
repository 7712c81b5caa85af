//! Deterministic synthetic scenes with known ground truth: a textured static
//! background, a (optionally textured) rectangle translating at constant
//! velocity, per-frame gain and additive Gaussian sensor noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dimension, Error, Result};
use crate::imagekit::{Image, Plane};

/// Smooth multi-octave value noise in `[0, 1]`, defined on the continuous
/// plane so that translated copies are exact.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueNoise {
    pub seed: u64,
    /// Lattice spacing of the coarsest octave, in pixels.
    pub cell: f64,
    pub octaves: u32,
}

impl ValueNoise {
    pub fn new(seed: u64, cell: f64, octaves: u32) -> Self {
        Self { seed, cell, octaves: octaves.max(1) }
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut cell = self.cell;
        for o in 0..self.octaves {
            total += amp * lattice_noise(self.seed.wrapping_add(o as u64 * 0x9E37), x / cell, y / cell);
            norm += amp;
            amp *= 0.5;
            cell *= 0.5;
        }
        total / norm
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice_value(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1F1F_1F1F) ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn lattice_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let v00 = lattice_value(seed, ix, iy);
    let v10 = lattice_value(seed, ix + 1, iy);
    let v01 = lattice_value(seed, ix, iy + 1);
    let v11 = lattice_value(seed, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * sx;
    let bottom = v01 + (v11 - v01) * sx;
    top + (bottom - top) * sy
}

/// Color texture in `[lo, hi]`, mostly luminance variation with a mild tint.
pub fn texture_image(width: usize, height: usize, seed: u64, cell: f64, range: [f64; 2]) -> Result<Image> {
    let base = ValueNoise::new(seed, cell, 3);
    let tint = ValueNoise::new(seed ^ 0xA5A5, cell * 2.0, 2);
    let [lo, hi] = range;
    Image::from_fn(width, height, |x, y| texture_at(&base, &tint, x as f64, y as f64, lo, hi))
}

fn texture_at(base: &ValueNoise, tint: &ValueNoise, x: f64, y: f64, lo: f64, hi: f64) -> [f64; 3] {
    let b = base.sample(x, y);
    let t = tint.sample(x, y) - 0.5;
    let span = hi - lo;
    [lo + span * (b + 0.3 * t).clamp(0.0, 1.0), lo + span * b, lo + span * (b - 0.3 * t).clamp(0.0, 1.0)]
}

/// Moving rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub width: f64,
    pub height: f64,
    pub color: [f64; 3],
    /// Top-left corner in frame 0, in pixels (pixel `x` covers `[x, x + 1)`).
    pub start: [f64; 2],
    /// Relative texture modulation of the object color, 0 for a flat object.
    pub texture: f64,
}

impl Default for ObjectSpec {
    fn default() -> Self {
        Self { width: 32.0, height: 32.0, color: [0.9, 0.8, 0.3], start: [20.0, 48.0], texture: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_seed: u64,
    pub background_cell: f64,
    pub background_range: [f64; 2],
    pub object: ObjectSpec,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub frames: usize,
    /// Per-frame gain; empty means unit gain everywhere.
    pub exposure_scale: Vec<f64>,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            background_seed: 1,
            background_cell: 8.0,
            background_range: [0.1, 0.6],
            object: ObjectSpec::default(),
            velocity: [2.0, 0.0],
            frames: 10,
            exposure_scale: Vec::new(),
            noise_sigma: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Spec("frame size must be non-zero".into()));
        }
        if self.frames < 2 {
            return Err(Error::Spec(format!("need at least 2 frames, got {}", self.frames)));
        }
        if !self.exposure_scale.is_empty() && self.exposure_scale.len() != self.frames {
            return Err(Error::Spec(format!("exposure_scale has {} entries for {} frames", self.exposure_scale.len(), self.frames)));
        }
        if self.exposure_scale.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Spec("exposure gains must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec("noise_sigma must be a non-negative number".into()));
        }
        let o = &self.object;
        if !(o.width > 0.0 && o.height > 0.0) {
            return Err(Error::Spec("object size must be positive".into()));
        }
        for t in 0..self.frames {
            let [x, y] = self.object_position(t);
            if x < 0.0 || y < 0.0 || x + o.width > self.width as f64 || y + o.height > self.height as f64 {
                return Err(Error::Spec(format!("object leaves the frame at t={t} (top-left {x:.2},{y:.2})")));
            }
        }
        Ok(())
    }

    pub fn object_position(&self, t: usize) -> [f64; 2] {
        [self.object.start[0] + self.velocity[0] * t as f64, self.object.start[1] + self.velocity[1] * t as f64]
    }

    fn gain(&self, t: usize) -> f64 {
        self.exposure_scale.get(t).copied().unwrap_or(1.0)
    }
}

/// Rendered frames plus their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub frames: Vec<Image>,
    /// Clean background at unit gain, without noise.
    pub background: Image,
    /// Pixels at least half covered by the object.
    pub masks: Vec<Plane>,
    /// Partially covered pixels along the object boundary.
    pub fringes: Vec<Plane>,
    /// Per-frame object coverage in `[0, 1]`.
    pub coverage: Vec<Plane>,
    /// Object displacement between consecutive frames (`frames - 1` entries).
    pub flows: Vec<[f64; 2]>,
    /// Object top-left corner per frame.
    pub positions: Vec<[f64; 2]>,
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Renders `spec`; `seed` drives only the sensor noise.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let background = texture_image(w, h, spec.background_seed, spec.background_cell, spec.background_range)?;
    let obj_noise = ValueNoise::new(spec.background_seed.wrapping_mul(31).wrapping_add(7), 6.0, 2);
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Spec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let o = &spec.object;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut fringes = Vec::with_capacity(spec.frames);
    let mut coverage = Vec::with_capacity(spec.frames);
    let mut positions = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let [ox, oy] = spec.object_position(t);
        positions.push([ox, oy]);
        let cov = Plane::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            overlap(x, x + 1.0, ox, ox + o.width) * overlap(y, y + 1.0, oy, oy + o.height)
        })?;
        let gain = spec.gain(t);
        let mut frame = Image::from_fn(w, h, |x, y| {
            let a = cov.get(x, y);
            let bg = background.pixel(x, y);
            let mut p = bg;
            if a > 0.0 {
                let (u, v) = (x as f64 + 0.5 - ox, y as f64 + 0.5 - oy);
                let m = 1.0 + o.texture * 2.0 * (obj_noise.sample(u, v) - 0.5);
                for c in 0..3 {
                    p[c] = (1.0 - a) * bg[c] + a * o.color[c] * m;
                }
            }
            [p[0] * gain, p[1] * gain, p[2] * gain]
        })?;
        if spec.noise_sigma > 0.0 {
            for v in frame.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        frames.push(frame.clamped(0.0, 1.0));
        masks.push(cov.map(|a| if a >= 0.5 { 1.0 } else { 0.0 }));
        fringes.push(cov.map(|a| if a > 0.0 && a < 1.0 { 1.0 } else { 0.0 }));
        coverage.push(cov);
    }
    let flows = positions.windows(2).map(|p| [p[1][0] - p[0][0], p[1][1] - p[0][1]]).collect();
    Ok(SyntheticScene { frames, background, masks, fringes, coverage, flows, positions })
}

/// Whole-frame pan of the background texture: frame `t` is the texture
/// translated by `velocity * t`, sampled exactly rather than resampled.
/// The object, gain and noise settings are ignored.
pub fn panning_frames(spec: &SceneSpec) -> Result<Vec<Image>> {
    if spec.frames == 0 {
        return Err(Error::Spec("frames must be at least 1".into()));
    }
    let base = ValueNoise::new(spec.background_seed, spec.background_cell, 3);
    let tint = ValueNoise::new(spec.background_seed ^ 0xA5A5, spec.background_cell * 2.0, 2);
    let [lo, hi] = spec.background_range;
    (0..spec.frames)
        .map(|t| {
            let (dx, dy) = (spec.velocity[0] * t as f64, spec.velocity[1] * t as f64);
            Image::from_fn(spec.width, spec.height, |x, y| texture_at(&base, &tint, x as f64 - dx, y as f64 - dy, lo, hi))
        })
        .collect()
}

/// Per-pixel mean of the frames in linear light.
pub fn accumulate_frames(frames: &[Image]) -> Result<Image> {
    let first = frames.first().ok_or_else(|| dimension("cannot accumulate zero frames"))?;
    let mut sum = vec![0.0; first.data().len()];
    for f in frames {
        first.ensure_same_dims(f, "accumulate_frames")?;
        for (s, v) in sum.iter_mut().zip(f.data()) {
            *s += v;
        }
    }
    let n = frames.len() as f64;
    Image::from_vec(first.width(), first.height(), sum.into_iter().map(|s| s / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_scene_repeats_frames() {
        let spec = SceneSpec { velocity: [0.0, 0.0], ..SceneSpec::default() };
        let scene = generate(&spec, 1).unwrap();
        for f in &scene.frames[1..] {
            assert_eq!(f, &scene.frames[0]);
        }
        for m in &scene.masks[1..] {
            assert_eq!(m, &scene.masks[0]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { noise_sigma: 0.02, ..SceneSpec::default() };
        assert_eq!(generate(&spec, 9).unwrap(), generate(&spec, 9).unwrap());
        assert_ne!(generate(&spec, 9).unwrap().frames, generate(&spec, 10).unwrap().frames);
    }

    #[test]
    fn truth_flows_follow_velocity() {
        let scene = generate(&SceneSpec::default(), 0).unwrap();
        assert_eq!(scene.flows, vec![[2.0, 0.0]; 9]);
    }

    #[test]
    fn object_leaving_frame_is_rejected() {
        let spec = SceneSpec { velocity: [20.0, 0.0], ..SceneSpec::default() };
        assert!(matches!(generate(&spec, 0), Err(Error::Spec(_))));
        let spec = SceneSpec { frames: 1, ..SceneSpec::default() };
        assert!(matches!(generate(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn masks_delimit_footprint() {
        let mut spec = SceneSpec::default();
        spec.object.start = [10.25, 20.0];
        spec.velocity = [1.5, 0.0];
        let scene = generate(&spec, 0).unwrap();
        for t in 0..spec.frames {
            let cov = &scene.coverage[t];
            let mask = &scene.masks[t];
            let fringe = &scene.fringes[t];
            for i in 0..cov.data().len() {
                let a = cov.data()[i];
                if a == 1.0 {
                    assert_eq!(mask.data()[i], 1.0);
                    assert_eq!(fringe.data()[i], 0.0);
                } else if a == 0.0 {
                    assert_eq!(mask.data()[i], 0.0);
                    assert_eq!(fringe.data()[i], 0.0);
                } else {
                    assert_eq!(fringe.data()[i], 1.0);
                }
            }
            let area: f64 = cov.data().iter().sum();
            assert!((area - 32.0 * 32.0).abs() < 1e-9);
        }
    }

    #[test]
    fn panning_frames_translate_exactly() {
        let spec = SceneSpec { velocity: [2.0, 0.0], frames: 3, ..SceneSpec::default() };
        let f = panning_frames(&spec).unwrap();
        assert_eq!(f[0], texture_image(spec.width, spec.height, spec.background_seed, spec.background_cell, spec.background_range).unwrap());
        for y in 0..spec.height {
            for x in 0..spec.width - 4 {
                assert_eq!(f[2].pixel(x + 4, y), f[0].pixel(x, y));
            }
        }
    }

    #[test]
    fn accumulate_examples() {
        let a = Image::filled(4, 3, [0.2; 3]).unwrap();
        let b = Image::filled(4, 3, [0.6; 3]).unwrap();
        assert_eq!(accumulate_frames(std::slice::from_ref(&a)).unwrap(), a);
        let m = accumulate_frames(&[a.clone(), b]).unwrap();
        assert!(m.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
        let c = Image::filled(3, 3, [0.0; 3]).unwrap();
        assert!(matches!(accumulate_frames(&[a, c]), Err(Error::Dimension(_))));
        assert!(accumulate_frames(&[]).is_err());
    }

    #[test]
    fn exposure_gain_scales_frames() {
        let spec = SceneSpec { exposure_scale: vec![0.5; 10], ..SceneSpec::default() };
        let dim = generate(&spec, 0).unwrap();
        let full = generate(&SceneSpec::default(), 0).unwrap();
        // Saturated pixels of the full-gain frame are clipped.
        for (a, b) in dim.frames[3].data().iter().zip(full.frames[3].data()).filter(|(_, b)| **b < 1.0) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_texture_is_continuous_under_translation() {
        let n = ValueNoise::new(4, 8.0, 3);
        let a = n.sample(10.3, 7.7);
        let b = n.sample(10.3 + 1e-9, 7.7);
        assert!((a - b).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&a));
    }
}
