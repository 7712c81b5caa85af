use motionfx_core::blurfx::{render_effect, EffectConfig, EffectMode};
use motionfx_core::colorxfer::{channel_stats, transfer};
use motionfx_core::layersep::{extract_mask, separate, DEFAULT_FEATHER, DEFAULT_TAU};
use motionfx_core::optflow::FlowParams;
use motionfx_core::synthgen::{generate, ObjectSpec, SceneSpec};
use motionfx_core::trackctl::{track_sequence, BoundingBox};

fn scene() -> SceneSpec {
    SceneSpec {
        width: 96,
        height: 64,
        frames: 8,
        velocity: [5.0, 0.0],
        object: ObjectSpec { width: 12.0, height: 12.0, start: [6.0, 24.0], ..ObjectSpec::default() },
        ..SceneSpec::default()
    }
}

fn object_box(spec: &SceneSpec) -> BoundingBox {
    BoundingBox::new(spec.object.start[0], spec.object.start[1], spec.object.width, spec.object.height).unwrap()
}

#[test]
fn modes_share_one_chain() {
    let spec = scene();
    let s = generate(&spec, 0).unwrap();
    let (_, low) = separate(&s.frames).unwrap();
    let masks: Vec<_> = s.frames.iter().zip(&low.background).map(|(f, b)| extract_mask(f, b, DEFAULT_TAU, DEFAULT_FEATHER).unwrap()).collect();
    let track = track_sequence(&s.frames, object_box(&spec), &FlowParams::default()).unwrap();

    let run = |mode| render_effect(&s.frames, &masks, &low.background, &track, &EffectConfig { mode, ..EffectConfig::default() }).unwrap();
    let pan = run(EffectMode::PanningShot);
    let cine = run(EffectMode::Cinemagraph);
    let global = run(EffectMode::GlobalBlur);
    assert_eq!(pan.len(), spec.frames);

    // Away from the subject the cinemagraph background does not change between frames.
    let (a, b) = (&cine[1].image, &cine[6].image);
    for y in 0..10 {
        for x in 0..spec.width {
            for c in 0..3 {
                let (p, q) = (a.pixel(x, y)[c] / cine[1].sigma, b.pixel(x, y)[c] / cine[6].sigma);
                assert!((p - q).abs() < 1e-9, "({x}, {y})");
            }
        }
    }
    assert!(cine.iter().all(|r| r.kernel == cine[0].kernel));

    // Global blur ignores masks, so its sigma is neutral.
    assert!(global.iter().all(|r| r.sigma == 1.0));
    // Tracked motion is ~5 px per frame, so every panning kernel spans about 5 px.
    for r in &pan {
        assert!((r.kernel.width() as i64 - 5).abs() <= 2, "kernel {}x{}", r.kernel.width(), r.kernel.height());
    }
}

#[test]
fn color_transfer_then_separation() {
    // A dim object, so no clean pixel clips and the dark frames are an exact gain.
    let base = scene();
    let spec = SceneSpec { velocity: [0.0, 0.0], frames: 4, object: ObjectSpec { color: [0.5, 0.4, 0.2], ..base.object }, ..base };
    let clean = generate(&spec, 0).unwrap();
    let dark = generate(&SceneSpec { exposure_scale: vec![0.3; 4], ..spec.clone() }, 0).unwrap();
    let reference = channel_stats(&clean.frames[0], None).unwrap();
    let fixed: Vec<_> = dark.frames.iter().map(|f| transfer(f, &reference).unwrap().0).collect();
    for (f, c) in fixed.iter().zip(&clean.frames) {
        let err = f.data().iter().zip(c.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
    }
    let (_, low) = separate(&fixed).unwrap();
    for (bg, f) in low.background.iter().zip(&fixed) {
        assert!(bg.data().iter().zip(f.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
