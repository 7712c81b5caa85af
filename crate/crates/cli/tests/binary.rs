mod common;

use std::process::Command;

use common::*;
use motionfx_core::synthgen::{generate, ObjectSpec, SceneSpec};

fn motionfx() -> Command {
    Command::new(env!("CARGO_BIN_EXE_motionfx"))
}

fn small_scene(dir: &std::path::Path) -> String {
    let spec = SceneSpec {
        width: 40,
        height: 32,
        frames: 3,
        velocity: [0.0, 0.0],
        object: ObjectSpec { start: [4.0, 4.0], width: 8.0, height: 8.0, ..ObjectSpec::default() },
        ..SceneSpec::default()
    };
    write_frames(dir, &generate(&spec, 0).unwrap().frames)
}

#[test]
fn help_lists_defaults_and_modes() {
    let out = motionfx().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for word in ["panning", "cinemagraph", "blur", "hdr", "separate", "flow", "blur_scale 1.0", "Exit codes"] {
        assert!(text.contains(word), "missing {word:?} in\n{text}");
    }
    let out = motionfx().args(["panning", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--input", "--range", "--ref", "--bbox", "--blur-scale", "--tau", "--out", "--config", "--threads", "--debug"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn separate_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_scene(dir.path());
    let out_dir = dir.path().join("o");
    let out = motionfx().args(["separate", "--input", &input, "--out"]).arg(&out_dir).args(["--threads", "2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.matches("color transfer skipped").count(), 1, "{stderr}");
    assert!(out_dir.join("background_000002.png").is_file());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_scene(dir.path());
    let cfg = dir.path().join("run.toml");
    let file_out = dir.path().join("from_file");
    let flag_out = dir.path().join("from_flag");
    std::fs::write(&cfg, format!("input = {input:?}\nout = {:?}\ntau = 0.2\n", file_out.to_string_lossy())).unwrap();
    let out = motionfx().args(["separate", "--config"]).arg(&cfg).arg("--out").arg(&flag_out).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(flag_out.join("mask_000000.png").is_file());
    assert!(!file_out.exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = small_scene(dir.path());

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, format!("input = {input:?}\nbluur_scale = 2.0\n")).unwrap();
    let out = motionfx().args(["panning", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bluur_scale") && stderr.contains("blur_scale"), "{stderr}");

    let out = motionfx().args(["panning", "--input", &input, "--bbox", "1,2,3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("nothing_%02d.png");
    let out = motionfx().args(["separate", "--input"]).arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing_00.png"));

    let out = motionfx().args(["separate", "--input", &input, "--range", "0..0", "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer separation"));
}
