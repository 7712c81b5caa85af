mod common;

use common::*;
use motionfx_cli::config::{FrameRange, Mode, ResponseSource};
use motionfx_cli::{run_pipeline, CliError};
use motionfx_core::blurfx::{horizontal_gradient_energy, line_kernel};
use motionfx_core::hdrmerge::{pixel_code, read_pfm};
use motionfx_core::imagekit::{convolve2d, read_gray_png, read_png, BorderPolicy};
use motionfx_core::synthgen::{generate, ObjectSpec, SceneSpec};
use motionfx_core::{Image, Plane};

fn static_scene() -> SceneSpec {
    SceneSpec {
        velocity: [0.0, 0.0],
        frames: 5,
        width: 48,
        height: 40,
        object: ObjectSpec { start: [8.0, 4.0], ..ObjectSpec::default() },
        ..SceneSpec::default()
    }
}

#[test]
fn separate_static_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = generate(&static_scene(), 0).unwrap();
    let input = write_frames(dir.path(), &scene.frames);
    let out = dir.path().join("out");
    let report = run_pipeline(&config(input, Mode::Separate, out.clone())).unwrap();
    assert_eq!(report.frames_written, 5);
    assert_eq!(report.warnings, vec!["no reference image given; color transfer skipped".to_string()]);
    for i in 0..5 {
        let frame = read_png(&dir.path().join(format!("f_{i:03}.png"))).unwrap();
        let bg = read_png(&out.join(format!("background_{i:06}.png"))).unwrap();
        assert!(frame.data().iter().zip(bg.data()).all(|(a, b)| (a - b).abs() <= 1e-6));
        let mask = read_gray_png(&out.join(format!("mask_{i:06}.png"))).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn panning_keeps_subject_and_blurs_background() {
    let dir = tempfile::tempdir().unwrap();
    let spec = panning_scene();
    let scene = generate(&spec, 0).unwrap();
    let input = write_frames(dir.path(), &scene.frames);
    let out = dir.path().join("out");
    let mut cfg = config(input, Mode::Panning, out.clone());
    cfg.bbox = Some(object_box(&spec));
    cfg.debug = true;
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.frames_written, spec.frames);
    assert!(out.join("track.txt").is_file() && out.join("kernel_000000.txt").is_file());

    // True motion is (6, 0): the background kernel is a 6 px horizontal line.
    let expected = convolve2d(&scene.background, &line_kernel(6.0, 0.0), BorderPolicy::Replicate).unwrap();
    let travel = scene.coverage.iter().fold(Plane::new(spec.width, spec.height).unwrap(), |acc, c| {
        Plane::from_fn(spec.width, spec.height, |x, y| acc.get(x, y).max(c.get(x, y))).unwrap()
    });
    let far = far_background(&travel, 8);
    for t in [0usize, 4, 7, 11] {
        let frame = read_png(&dir.path().join(format!("f_{t:03}.png"))).unwrap();
        let result = read_png(&out.join(format!("out_{t:06}.png"))).unwrap();
        let [ox, oy] = scene.positions[t];
        let (x0, y0) = (ox as usize + 4, oy as usize + 4);
        for y in y0..y0 + 8 {
            for x in x0..x0 + 8 {
                for c in 0..3 {
                    assert!((result.pixel(x, y)[c] - frame.pixel(x, y)[c]).abs() <= 1e-3, "frame {t} at ({x}, {y})");
                }
            }
        }
        let (mut err, mut n) = (0.0, 0);
        for (i, &keep) in far.data().iter().enumerate() {
            if keep > 0.0 {
                for c in 0..3 {
                    err += (result.data()[i * 3 + c] - expected.data()[i * 3 + c]).abs();
                    n += 1;
                }
            }
        }
        assert!(err / n as f64 <= 0.02, "background mae {}", err / n as f64);
        assert!(horizontal_gradient_energy(&result, &far) < 0.7 * horizontal_gradient_energy(&frame, &far));
    }
}

#[test]
fn hdr_bracket_matches_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let radiance = log_uniform_radiance(48, 40, 11, 0.1, 1.0);
    let evs = [-2.0, 0.0, 2.0];
    let input = write_bracket(dir.path(), &radiance, &evs);
    let mid = linear_camera(&radiance, 0.0);

    for (response, bound, median_bound) in [(ResponseSource::Linear, 0.02, 0.02), (ResponseSource::Recover, 1.0, 0.03)] {
        let out = dir.path().join(format!("out_{response:?}"));
        let mut cfg = config(input.clone(), Mode::Hdr, out.clone());
        cfg.hdr.evs = Some(evs.to_vec());
        cfg.hdr.response = response;
        let report = run_pipeline(&cfg).unwrap();
        assert_eq!(report.frames_written, 1);
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
        let merged = read_pfm(&out.join("hdr.pfm")).unwrap();
        assert!(out.join("hdr.png").is_file());
        let mut errors = Vec::new();
        for (i, (&m, &e)) in merged.data().iter().zip(radiance.data()).enumerate() {
            if mid.data[i] > 0 && mid.data[i] < 255 {
                errors.push((m - e * 255.0 / 128.0).abs() / (e * 255.0 / 128.0));
            }
        }
        errors.sort_by(f64::total_cmp);
        let (median, worst) = (errors[errors.len() / 2], errors[errors.len() - 1]);
        assert!(worst <= bound && median <= median_bound, "{response:?}: median {median} worst {worst}");
    }
}

#[test]
fn hdr_compensation_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        width: 48,
        height: 40,
        frames: 3,
        velocity: [1.0, 0.0],
        object: ObjectSpec { start: [4.0, 4.0], width: 12.0, height: 12.0, ..ObjectSpec::default() },
        ..SceneSpec::default()
    };
    let clean = generate(&spec, 0).unwrap();
    let dark = generate(&SceneSpec { exposure_scale: vec![0.25; 3], noise_sigma: 0.005, ..spec.clone() }, 1).unwrap();
    let input = write_frames(dir.path(), &dark.frames);
    let reference = dir.path().join("reference.png");
    motionfx_core::imagekit::write_png(&reference, &clean.frames[0]).unwrap();
    let out = dir.path().join("out");
    let mut cfg = config(input.clone(), Mode::Hdr, out.clone());
    cfg.reference = Some(reference);
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.frames_written, 3);
    for i in 0..3 {
        let r = read_pfm(&out.join(format!("hdr_{i:06}.pfm"))).unwrap();
        assert!(r.is_finite() && r.data().iter().all(|&v| v > 0.0));
        let preview = read_png(&out.join(format!("out_{i:06}.png"))).unwrap();
        assert!(preview.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // Without a reference there is nothing to pair the frames with.
    assert!(report.warnings.iter().all(|w| !w.contains("color transfer skipped")));
    let err = run_pipeline(&config(input, Mode::Hdr, dir.path().join("o2"))).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn flow_mode_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { frames: 4, ..SceneSpec::default() };
    let scene = generate(&spec, 0).unwrap();
    let input = write_frames(dir.path(), &scene.frames);
    let out = dir.path().join("out");
    let mut cfg = config(input, Mode::Flow, out.clone());
    cfg.range = Some(FrameRange { first: 1, last: 3 });
    cfg.bbox = Some(object_box(&spec).translated([2.0, 0.0]));
    cfg.debug = true;
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.frames_written, 2);
    assert!(out.join("flow_000001.png").is_file() && out.join("flow_000002.png").is_file());
    assert!(!out.join("flow_000000.png").exists());
    let summary = std::fs::read_to_string(out.join("flow_mean.txt")).unwrap();
    for line in summary.lines() {
        let dx: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!((dx - 2.0).abs() < 0.3, "{line}");
    }
}

#[test]
fn cinemagraph_and_blur_modes_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { frames: 4, ..SceneSpec::default() };
    let scene = generate(&spec, 0).unwrap();
    let input = write_frames(dir.path(), &scene.frames);
    for mode in [Mode::Cinemagraph, Mode::Blur] {
        let out = dir.path().join(mode.as_str());
        let mut cfg = config(input.clone(), mode, out.clone());
        cfg.bbox = Some(object_box(&spec));
        cfg.fix_anchor = mode == Mode::Blur;
        assert_eq!(run_pipeline(&cfg).unwrap().frames_written, 4);
        assert!(out.join("out_000003.png").is_file());
    }
}

#[test]
fn errors_name_path_or_stage() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none_%03d.png").to_string_lossy().into_owned();
    let err = run_pipeline(&config(missing, Mode::Separate, dir.path().join("o"))).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("none_000.png"), "{err}");

    let scene = generate(&static_scene(), 0).unwrap();
    let input = write_frames(dir.path(), &scene.frames[..1]);
    let mut cfg = config(input.clone(), Mode::Separate, dir.path().join("o"));
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, CliError::Stage { .. }));
    assert!(err.to_string().starts_with("layer separation"), "{err}");

    cfg.range = Some(FrameRange { first: 0, last: 3 });
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("f_001.png"), "{err}");

    let text = format!("input = {input:?}\nmode = \"panning\"\nbbox = \"1,2,-3,4\"\n");
    assert_eq!(motionfx_cli::parse_config(&text).unwrap_err().exit_code(), 2);
}

#[test]
fn reference_is_applied_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let spec = static_scene();
    let clean = generate(&spec, 0).unwrap();
    let dark = generate(&SceneSpec { exposure_scale: vec![0.3; 5], ..spec }, 0).unwrap();
    let input = write_frames(dir.path(), &dark.frames);
    let reference = dir.path().join("ref.png");
    motionfx_core::imagekit::write_png(&reference, &clean.frames[0]).unwrap();
    let out = dir.path().join("out");
    let mut cfg = config(input, Mode::Separate, out.clone());
    cfg.reference = Some(reference);
    let report = run_pipeline(&cfg).unwrap();
    assert!(report.warnings.is_empty());
    let bg = read_png(&out.join("background_000002.png")).unwrap();
    let target = read_png(&dir.path().join("ref.png")).unwrap();
    assert!((bg.mean_luminance() - target.mean_luminance()).abs() < 0.01);
}

#[test]
fn linear_camera_codes_survive_png() {
    let dir = tempfile::tempdir().unwrap();
    let radiance = log_uniform_radiance(8, 8, 2, 0.05, 1.0);
    write_bracket(dir.path(), &radiance, &[0.0]);
    let decoded: Image = read_png(&dir.path().join("f_000.png")).unwrap();
    let codes = linear_camera(&radiance, 0.0);
    for (v, &z) in decoded.data().iter().zip(&codes.data) {
        assert_eq!(pixel_code(motionfx_core::imagekit::srgb_oetf(*v)), z);
    }
}
