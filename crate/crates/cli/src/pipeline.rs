//! Stage-sequential pipeline: decode, color transfer, layer separation,
//! tracking, then effect rendering, flow export or HDR merging.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use motionfx_core::blurfx::{render_effect, EffectConfig, EffectMode};
use motionfx_core::colorxfer::{channel_stats, transfer};
use motionfx_core::hdrmerge::{
    build_stack_from_compensation, default_white, merge_radiance, recover_response, tone_map, write_pfm, ExposureStack, RadianceMap, ResponseCurve,
    CODES, PIVOT,
};
use motionfx_core::imagekit::{read_png, srgb_eotf, srgb_oetf, write_gray_png, write_png, write_raster_png, FramePattern, Image, Plane};
use motionfx_core::layersep::{extract_mask, separate, Mask};
use motionfx_core::optflow::{farneback_flow, mean_flow, visualize_flow, FlowField, Region};
use motionfx_core::trackctl::{track_sequence, TrackResult};
use rayon::prelude::*;

use crate::config::{Mode, PipelineConfig, ResponseSource};
use crate::error::{AtStage, CliError, Stage};

/// Summary of a completed run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExitReport {
    pub frames_written: usize,
    /// Distinct warnings in the order first raised.
    pub warnings: Vec<String>,
    /// Every file written, in write order.
    pub outputs: Vec<PathBuf>,
}

impl ExitReport {
    fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        if !self.warnings.contains(&msg) {
            log::warn!("{msg}");
            self.warnings.push(msg);
        }
    }
}

struct Writer<'a> {
    dir: &'a Path,
    report: ExitReport,
}

impl Writer<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn image(&mut self, name: &str, img: &Image) -> Result<(), CliError> {
        let p = self.path(name);
        write_png(&p, img).at(Stage::Encode)?;
        self.report.outputs.push(p);
        Ok(())
    }

    fn gray(&mut self, name: &str, plane: &Plane) -> Result<(), CliError> {
        let p = self.path(name);
        write_gray_png(&p, plane).at(Stage::Encode)?;
        self.report.outputs.push(p);
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        self.report.outputs.push(p);
        Ok(())
    }
}

fn frame_name(prefix: &str, index: usize, ext: &str) -> String {
    format!("{prefix}_{index:06}.{ext}")
}

/// Frame indices from the configured range, or the longest run of existing
/// files starting at 0 (or 1).
pub fn resolve_indices(cfg: &PipelineConfig) -> Result<Vec<usize>, CliError> {
    let pattern = FramePattern::parse(&cfg.input).map_err(|e| CliError::config(format!("input: {e}")))?;
    if let Some(r) = cfg.range {
        return Ok(r.indices().collect());
    }
    let start = [0, 1].into_iter().find(|&i| pattern.path(i).is_file());
    let Some(start) = start else {
        return Err(CliError::io(pattern.path(0), "no frames found (tried indices 0 and 1)"));
    };
    Ok((start..).take_while(|&i| pattern.path(i).is_file()).collect())
}

fn decode(cfg: &PipelineConfig, indices: &[usize]) -> Result<Vec<Image>, CliError> {
    let pattern = FramePattern::parse(&cfg.input).map_err(|e| CliError::config(format!("input: {e}")))?;
    let frames: Vec<Image> = indices.par_iter().map(|&i| read_png(&pattern.path(i))).collect::<Result<_, _>>().at(Stage::Decode)?;
    for (f, &i) in frames.iter().zip(indices).skip(1) {
        frames[0].ensure_same_dims(f, &format!("frame {i}")).at(Stage::Decode)?;
    }
    Ok(frames)
}

fn color_transfer(frames: &[Image], reference: &Image) -> Result<Vec<Image>, CliError> {
    let stats = channel_stats(reference, None).at(Stage::ColorTransfer)?;
    frames.par_iter().map(|f| transfer(f, &stats).map(|(img, _)| img)).collect::<Result<_, _>>().at(Stage::ColorTransfer)
}

struct Layers {
    backgrounds: Vec<Image>,
    masks: Vec<Mask>,
    singular_value: f64,
    iterations: usize,
    left_vector: Vec<f64>,
}

fn layers(frames: &[Image], cfg: &PipelineConfig) -> Result<Layers, CliError> {
    let (_, low_rank) = separate(frames).at(Stage::LayerSeparation)?;
    let masks = frames
        .par_iter()
        .zip(&low_rank.background)
        .map(|(f, b)| extract_mask(f, b, cfg.tau, cfg.feather))
        .collect::<Result<_, _>>()
        .at(Stage::LayerSeparation)?;
    Ok(Layers {
        masks,
        singular_value: low_rank.singular_value,
        iterations: low_rank.iterations,
        left_vector: low_rank.left_vector,
        backgrounds: low_rank.background,
    })
}

fn write_layers(w: &mut Writer<'_>, indices: &[usize], layers: &Layers) -> Result<(), CliError> {
    for (t, &i) in indices.iter().enumerate() {
        w.image(&frame_name("background", i, "png"), &layers.backgrounds[t])?;
        w.gray(&frame_name("mask", i, "png"), &layers.masks[t])?;
    }
    Ok(())
}

/// Runs the configured mode and writes its outputs to `cfg.out`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ExitReport, CliError> {
    let indices = resolve_indices(cfg)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let raw = decode(cfg, &indices)?;
    let reference = match &cfg.reference {
        Some(p) => Some(read_png(p).at(Stage::Decode)?),
        None => None,
    };
    log::info!("decoded {} frames of {}x{}", raw.len(), raw[0].width(), raw[0].height());

    let mut w = Writer { dir: &cfg.out, report: ExitReport::default() };
    let bracketed = cfg.mode == Mode::Hdr && cfg.hdr.evs.is_some();
    let frames = match &reference {
        Some(_) if bracketed => {
            w.report.warn("reference image ignored: bracketed HDR input is merged without color transfer");
            raw.clone()
        }
        Some(r) => color_transfer(&raw, r)?,
        None => {
            if !bracketed {
                w.report.warn("no reference image given; color transfer skipped");
            }
            raw.clone()
        }
    };

    match cfg.mode {
        Mode::Separate => run_separate(cfg, &indices, &frames, &mut w)?,
        Mode::Panning | Mode::Cinemagraph | Mode::Blur => run_effect(cfg, &indices, &frames, &mut w)?,
        Mode::Flow => run_flow(cfg, &indices, &frames, &mut w)?,
        Mode::Hdr if bracketed => run_hdr_bracket(cfg, &raw, &mut w)?,
        Mode::Hdr => run_hdr_pairs(cfg, &indices, &raw, &frames, reference.is_some(), &mut w)?,
    }
    Ok(w.report)
}

fn run_separate(cfg: &PipelineConfig, indices: &[usize], frames: &[Image], w: &mut Writer<'_>) -> Result<(), CliError> {
    let layers = layers(frames, cfg)?;
    write_layers(w, indices, &layers)?;
    if cfg.debug {
        let mut s = format!("sigma {:.9e}\niterations {}\n", layers.singular_value, layers.iterations);
        for (t, u) in layers.left_vector.iter().enumerate() {
            let _ = writeln!(s, "u {} {u:.9}", indices[t]);
        }
        w.text("low_rank.txt", &s)?;
    }
    w.report.frames_written = indices.len();
    Ok(())
}

fn run_effect(cfg: &PipelineConfig, indices: &[usize], frames: &[Image], w: &mut Writer<'_>) -> Result<(), CliError> {
    let bbox = cfg.bbox.ok_or_else(|| CliError::config(format!("mode {} needs a bounding box", cfg.mode)))?;
    let track: TrackResult = track_sequence(frames, bbox, &cfg.flow).at(Stage::Tracking)?;
    let mode = match cfg.mode {
        Mode::Panning => EffectMode::PanningShot,
        Mode::Cinemagraph => EffectMode::Cinemagraph,
        _ => EffectMode::GlobalBlur,
    };
    let (backgrounds, masks, layer_info) = if mode == EffectMode::GlobalBlur {
        let empty = Plane::new(frames[0].width(), frames[0].height()).at(Stage::Render)?;
        (frames.to_vec(), vec![empty; frames.len()], None)
    } else {
        let l = layers(frames, cfg)?;
        (l.backgrounds.clone(), l.masks.clone(), Some(l))
    };
    let effect = EffectConfig { mode, blur_scale: cfg.blur_scale, tau: cfg.tau, feather: cfg.feather, fix_anchor: cfg.fix_anchor };
    let rendered = render_effect(frames, &masks, &backgrounds, &track, &effect).at(Stage::Render)?;
    for (r, &i) in rendered.iter().zip(indices) {
        w.image(&frame_name("out", i, "png"), &r.image)?;
    }
    if cfg.debug {
        w.text("track.txt", &track.to_text())?;
        let mut sigmas = String::new();
        for (r, &i) in rendered.iter().zip(indices) {
            w.text(&frame_name("kernel", i, "txt"), &r.kernel.to_text())?;
            let _ = writeln!(sigmas, "{i} {:.9}", r.sigma);
        }
        w.text("sigma.txt", &sigmas)?;
        if let Some(l) = &layer_info {
            write_layers(w, indices, l)?;
        }
    }
    w.report.frames_written = rendered.len();
    Ok(())
}

fn run_flow(cfg: &PipelineConfig, indices: &[usize], frames: &[Image], w: &mut Writer<'_>) -> Result<(), CliError> {
    if frames.len() < 2 {
        return Err(CliError::Stage { stage: Stage::Flow, source: motionfx_core::Error::Contract("flow needs at least 2 frames".into()) });
    }
    let flows: Vec<FlowField> = frames.par_windows(2).map(|p| farneback_flow(&p[0], &p[1], &cfg.flow)).collect::<Result<_, _>>().at(Stage::Flow)?;
    let mut summary = String::new();
    for (f, &i) in flows.iter().zip(indices) {
        let p = w.path(&frame_name("flow", i, "png"));
        write_raster_png(&p, &visualize_flow(f)).at(Stage::Encode)?;
        w.report.outputs.push(p);
        if let Some(b) = cfg.bbox {
            let m = mean_flow(f, Region::Box(b)).at(Stage::Flow)?;
            let _ = writeln!(summary, "{i} {:.6} {:.6}", m[0], m[1]);
        }
    }
    if cfg.debug && cfg.bbox.is_some() {
        w.text("flow_mean.txt", &summary)?;
    }
    w.report.frames_written = flows.len();
    Ok(())
}

/// Display-encoded values, so that 8-bit codes match the file bytes.
fn encoded(img: &Image) -> Image {
    img.map(srgb_oetf)
}

/// Response of a camera writing linear exposure through the sRGB curve.
fn srgb_response() -> ResponseCurve {
    let pivot = srgb_eotf(PIVOT as f64 / 255.0);
    let mut g = [[0.0; CODES]; 3];
    for ch in g.iter_mut() {
        for (z, v) in ch.iter_mut().enumerate() {
            *v = (srgb_eotf((z as f64).max(0.5) / 255.0) / pivot).ln();
        }
    }
    ResponseCurve::from_tables(g).expect("finite table")
}

fn response_for(cfg: &PipelineConfig, stack: &ExposureStack, report: &mut ExitReport) -> Result<ResponseCurve, CliError> {
    if cfg.hdr.response == ResponseSource::Linear {
        return Ok(ResponseCurve::linear());
    }
    let pairs = stack.len() - 1;
    let needed = CODES.div_ceil(pairs);
    let samples = if cfg.hdr.samples < needed {
        report.warn(format!(
            "hdr.samples raised from {} to {needed} so that response recovery is overdetermined for {} images",
            cfg.hdr.samples,
            stack.len()
        ));
        needed
    } else {
        cfg.hdr.samples
    };
    recover_response(stack, samples, cfg.hdr.lambda).at(Stage::Hdr)
}

fn tone_mapped(cfg: &PipelineConfig, radiance: &RadianceMap) -> Result<Image, CliError> {
    let white = cfg.hdr.white.unwrap_or_else(|| default_white(radiance, cfg.hdr.key));
    tone_map(radiance, cfg.hdr.key, white).at(Stage::Hdr)
}

fn write_radiance(w: &mut Writer<'_>, name: &str, radiance: &RadianceMap) -> Result<(), CliError> {
    let p = w.path(name);
    write_pfm(&p, &radiance.image).at(Stage::Encode)?;
    w.report.outputs.push(p);
    Ok(())
}

fn run_hdr_bracket(cfg: &PipelineConfig, raw: &[Image], w: &mut Writer<'_>) -> Result<(), CliError> {
    let evs = cfg.hdr.evs.clone().expect("bracketed");
    if evs.len() != raw.len() {
        return Err(CliError::config(format!("hdr.evs has {} values for {} input frames", evs.len(), raw.len())));
    }
    let stack = ExposureStack::new(raw.iter().map(encoded).collect(), evs).at(Stage::Hdr)?;
    let response = response_for(cfg, &stack, &mut w.report)?;
    let radiance = merge_radiance(&stack, &response);
    write_radiance(w, "hdr.pfm", &radiance)?;
    w.image("hdr.png", &tone_mapped(cfg, &radiance)?)?;
    if cfg.debug {
        w.text("response.txt", &response.to_text())?;
    }
    w.report.frames_written = 1;
    Ok(())
}

fn run_hdr_pairs(
    cfg: &PipelineConfig,
    indices: &[usize],
    raw: &[Image],
    compensated: &[Image],
    has_reference: bool,
    w: &mut Writer<'_>,
) -> Result<(), CliError> {
    if !has_reference {
        return Err(CliError::config("mode hdr needs either hdr.evs (bracketed input) or a reference image"));
    }
    for (t, &i) in indices.iter().enumerate() {
        let pair = build_stack_from_compensation(&raw[t], &compensated[t], cfg.hdr.ev_gap).at(Stage::Hdr)?;
        let stack = ExposureStack::new(vec![encoded(&raw[t]), encoded(&compensated[t])], pair.stack.evs().to_vec()).at(Stage::Hdr)?;
        let response = match pair.warning {
            Some(msg) => {
                log::debug!("frame {i}: {msg}");
                w.report.warn("raw and compensated frames are equally bright; merging degenerate stacks with the sRGB response");
                srgb_response()
            }
            None => response_for(cfg, &stack, &mut w.report)?,
        };
        let radiance = merge_radiance(&stack, &response);
        write_radiance(w, &frame_name("hdr", i, "pfm"), &radiance)?;
        w.image(&frame_name("out", i, "png"), &tone_mapped(cfg, &radiance)?)?;
        if cfg.debug {
            w.text(&frame_name("response", i, "txt"), &response.to_text())?;
        }
    }
    w.report.frames_written = indices.len();
    Ok(())
}
