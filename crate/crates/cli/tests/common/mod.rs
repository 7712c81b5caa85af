#![allow(dead_code)]

use std::path::{Path, PathBuf};

use motionfx_cli::config::{HdrParams, Mode, PipelineConfig};
use motionfx_core::hdrmerge::pixel_code;
use motionfx_core::imagekit::{write_png, write_raster_png, Raster8};
use motionfx_core::optflow::FlowParams;
use motionfx_core::synthgen::{ObjectSpec, SceneSpec};
use motionfx_core::trackctl::BoundingBox;
use motionfx_core::{Image, Plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PATTERN: &str = "f_%03d.png";

/// Writes `frames` as `dir/f_000.png`, `dir/f_001.png`, ...
pub fn write_frames(dir: &Path, frames: &[Image]) -> String {
    for (i, f) in frames.iter().enumerate() {
        write_png(&dir.join(format!("f_{i:03}.png")), f).unwrap();
    }
    dir.join(PATTERN).to_string_lossy().into_owned()
}

pub fn config(input: String, mode: Mode, out: PathBuf) -> PipelineConfig {
    PipelineConfig {
        input,
        range: None,
        reference: None,
        mode,
        bbox: None,
        blur_scale: 1.0,
        tau: motionfx_core::layersep::DEFAULT_TAU,
        feather: motionfx_core::layersep::DEFAULT_FEATHER,
        fix_anchor: false,
        out,
        debug: false,
        threads: None,
        flow: FlowParams::default(),
        hdr: HdrParams::default(),
    }
}

/// Small fast subject, so each background pixel is visible in most frames.
pub fn panning_scene() -> SceneSpec {
    SceneSpec {
        width: 128,
        height: 96,
        object: ObjectSpec { width: 16.0, height: 16.0, start: [8.0, 40.0], ..ObjectSpec::default() },
        velocity: [6.0, 0.0],
        frames: 12,
        ..SceneSpec::default()
    }
}

pub fn object_box(spec: &SceneSpec) -> BoundingBox {
    BoundingBox::new(spec.object.start[0], spec.object.start[1], spec.object.width, spec.object.height).unwrap()
}

/// Relative radiance, log-uniform per pixel with a small per-channel tint.
pub fn log_uniform_radiance(w: usize, h: usize, seed: u64, lo: f64, hi: f64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (lo.ln(), hi.ln());
    Image::from_fn(w, h, |_, _| {
        let base: f64 = rng.random_range(a..b);
        [(base + rng.random_range(-0.2..0.2)).exp(), base.exp(), (base + rng.random_range(-0.2..0.2)).exp()]
    })
    .unwrap()
}

/// Linear camera: 8-bit code `round(255 * clamp(E * 2^ev))`.
pub fn linear_camera(radiance: &Image, ev: f64) -> Raster8 {
    Raster8 { width: radiance.width(), height: radiance.height(), data: radiance.data().iter().map(|e| pixel_code(e * ev.exp2())).collect() }
}

/// Writes a linear-camera bracket as raw 8-bit PNG codes.
pub fn write_bracket(dir: &Path, radiance: &Image, evs: &[f64]) -> String {
    for (i, &ev) in evs.iter().enumerate() {
        write_raster_png(&dir.join(format!("f_{i:03}.png")), &linear_camera(radiance, ev)).unwrap();
    }
    dir.join(PATTERN).to_string_lossy().into_owned()
}

/// All files in `dir`, sorted by name, with their bytes.
pub fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

/// Pixels farther than `margin` from any covered pixel and from the border.
pub fn far_background(coverage: &Plane, margin: usize) -> Plane {
    let (w, h) = (coverage.width(), coverage.height());
    Plane::from_fn(w, h, |x, y| {
        if x < margin || y < margin || x + margin >= w || y + margin >= h {
            return 0.0;
        }
        let near = (y - margin..=y + margin).any(|yy| (x - margin..=x + margin).any(|xx| coverage.get(xx, yy) > 0.0));
        if near {
            0.0
        } else {
            1.0
        }
    })
    .unwrap()
}
