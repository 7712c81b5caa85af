//! Pipeline configuration. Values come from command-line flags, then a TOML
//! file, then built-in defaults, in that order of precedence.
//!
//! ```toml
//! input = "frames/frame_%04d.png"
//! range = "0..9"
//! mode = "panning"
//! bbox = "20,48,32,32"
//! blur_scale = 4.5
//!
//! [flow]
//! window = 15
//!
//! [hdr]
//! evs = [-2.0, 0.0, 2.0]
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use motionfx_core::hdrmerge::{DEFAULT_KEY, DEFAULT_LAMBDA, DEFAULT_SAMPLES};
use motionfx_core::layersep::{DEFAULT_FEATHER, DEFAULT_TAU};
use motionfx_core::optflow::FlowParams;
use motionfx_core::trackctl::BoundingBox;
use serde::Deserialize;

use crate::error::CliError;

pub const TOP_LEVEL_KEYS: &[&str] =
    &["input", "range", "reference", "mode", "bbox", "blur_scale", "tau", "feather", "fix_anchor", "out", "debug", "threads", "flow", "hdr"];
pub const FLOW_KEYS: &[&str] = &["pyramid_levels", "pyramid_scale", "window", "iterations", "poly_n", "poly_sigma"];
pub const HDR_KEYS: &[&str] = &["evs", "ev_gap", "samples", "lambda", "key", "white", "response"];

pub const DEFAULT_OUT: &str = "out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Panning,
    Cinemagraph,
    Blur,
    Hdr,
    Separate,
    Flow,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Panning, Mode::Cinemagraph, Mode::Blur, Mode::Hdr, Mode::Separate, Mode::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Panning => "panning",
            Mode::Cinemagraph => "cinemagraph",
            Mode::Blur => "blur",
            Mode::Hdr => "hdr",
            Mode::Separate => "separate",
            Mode::Flow => "flow",
        }
    }

    /// Modes that track a user-supplied box.
    pub fn needs_bbox(self) -> bool {
        matches!(self, Mode::Panning | Mode::Cinemagraph | Mode::Blur)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CliError::config(format!("unknown mode {s:?}; expected one of panning, cinemagraph, blur, hdr, separate, flow")))
    }
}

/// Inclusive frame index range written `a..b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameRange {
    pub first: usize,
    pub last: usize,
}

impl FrameRange {
    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.first..=self.last
    }
}

impl FromStr for FrameRange {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::config(format!("range {s:?} must look like 0..9 (inclusive)"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let first: usize = a.trim().parse().map_err(|_| bad())?;
        let last: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if last < first {
            return Err(CliError::config(format!("range {s:?} is empty")));
        }
        Ok(Self { first, last })
    }
}

/// How the camera response is obtained in hdr mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseSource {
    /// Recovered from the stack itself.
    #[default]
    Recover,
    /// Pixel codes are taken as linear in exposure.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HdrParams {
    /// Exposure values of a bracketed input, one per frame. Without them each
    /// frame is paired with its color-compensated version.
    pub evs: Option<Vec<f64>>,
    /// Stops between raw and compensated frames; estimated when absent.
    pub ev_gap: Option<f64>,
    pub samples: usize,
    pub lambda: f64,
    pub key: f64,
    /// Tone-mapping white point; the 99.5th luminance percentile when absent.
    pub white: Option<f64>,
    pub response: ResponseSource,
}

impl Default for HdrParams {
    fn default() -> Self {
        Self {
            evs: None,
            ev_gap: None,
            samples: DEFAULT_SAMPLES,
            lambda: DEFAULT_LAMBDA,
            key: DEFAULT_KEY,
            white: None,
            response: ResponseSource::Recover,
        }
    }
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub input: String,
    /// Probed from index 0 (or 1) while files exist when absent.
    pub range: Option<FrameRange>,
    pub reference: Option<PathBuf>,
    pub mode: Mode,
    pub bbox: Option<BoundingBox>,
    pub blur_scale: f64,
    pub tau: f64,
    pub feather: usize,
    pub fix_anchor: bool,
    pub out: PathBuf,
    pub debug: bool,
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
    pub flow: FlowParams,
    pub hdr: HdrParams,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialFlow {
    pub pyramid_levels: Option<usize>,
    pub pyramid_scale: Option<f64>,
    pub window: Option<usize>,
    pub iterations: Option<usize>,
    pub poly_n: Option<usize>,
    pub poly_sigma: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialHdr {
    pub evs: Option<Vec<f64>>,
    pub ev_gap: Option<f64>,
    pub samples: Option<usize>,
    pub lambda: Option<f64>,
    pub key: Option<f64>,
    pub white: Option<f64>,
    pub response: Option<ResponseSource>,
}

/// A configuration layer in which every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub input: Option<String>,
    pub range: Option<String>,
    pub reference: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub bbox: Option<String>,
    pub blur_scale: Option<f64>,
    pub tau: Option<f64>,
    pub feather: Option<usize>,
    pub fix_anchor: Option<bool>,
    pub out: Option<PathBuf>,
    pub debug: Option<bool>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub flow: PartialFlow,
    #[serde(default)]
    pub hdr: PartialHdr,
}

macro_rules! overlay {
    ($base:expr, $top:expr; $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

/// Line number (1-based) of the first assignment to `key`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|line| {
            line.split_once('=').is_some_and(|(lhs, _)| {
                let lhs = lhs.trim();
                let last = lhs.rsplit('.').next().unwrap_or(lhs).trim().trim_matches('"');
                last == key
            })
        })
        .map(|i| i + 1)
}

fn check_keys(text: &str, table: &toml::Table, valid: &[&str], section: Option<&str>) -> Result<(), CliError> {
    for key in table.keys() {
        if valid.contains(&key.as_str()) {
            continue;
        }
        let qualified = match section {
            Some(s) => format!("{s}.{key}"),
            None => key.clone(),
        };
        let mut msg = format!("unknown key `{qualified}`");
        if let Some(line) = key_line(text, key) {
            msg.push_str(&format!(" at line {line}"));
        }
        let best = valid.iter().map(|v| (strsim::damerau_levenshtein(key, v), *v)).min().filter(|(d, _)| *d <= 3);
        if let Some((_, suggestion)) = best {
            msg.push_str(&format!("; did you mean `{suggestion}`?"));
        }
        msg.push_str(&format!(" Valid keys: {}", valid.join(", ")));
        return Err(CliError::Config(msg));
    }
    Ok(())
}

impl PartialConfig {
    /// Parses a TOML document, rejecting unknown keys.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| CliError::config(e.to_string().trim_end().to_string()))?;
        check_keys(text, &table, TOP_LEVEL_KEYS, None)?;
        for (section, keys) in [("flow", FLOW_KEYS), ("hdr", HDR_KEYS)] {
            match table.get(section) {
                Some(toml::Value::Table(t)) => check_keys(text, t, keys, Some(section))?,
                Some(_) => return Err(CliError::config(format!("`{section}` must be a table"))),
                None => {}
            }
        }
        toml::from_str(text).map_err(|e| CliError::config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Keys set in `top` replace those in `self`.
    pub fn overlay(mut self, top: PartialConfig) -> Self {
        overlay!(self, top; input, range, reference, mode, bbox, blur_scale, tau, feather, fix_anchor, out, debug, threads);
        overlay!(self.flow, top.flow; pyramid_levels, pyramid_scale, window, iterations, poly_n, poly_sigma);
        overlay!(self.hdr, top.hdr; evs, ev_gap, samples, lambda, key, white, response);
        self
    }

    /// Fills defaults and validates.
    pub fn resolve(self) -> Result<PipelineConfig, CliError> {
        let input = self.input.ok_or_else(|| CliError::config("missing required key `input` (frame path pattern)"))?;
        let mode = self.mode.ok_or_else(|| CliError::config("missing required key `mode`"))?;
        let range = self.range.as_deref().map(str::parse).transpose()?;
        let bbox = match self.bbox.as_deref() {
            Some(s) => Some(s.parse::<BoundingBox>().map_err(|e| CliError::config(format!("bbox: {e}")))?),
            None if mode.needs_bbox() => {
                return Err(CliError::config(format!("missing required key `bbox` for mode {mode}")));
            }
            None => None,
        };

        let defaults = FlowParams::default();
        let f = self.flow;
        let flow = FlowParams {
            pyramid_levels: f.pyramid_levels.unwrap_or(defaults.pyramid_levels),
            pyramid_scale: f.pyramid_scale.unwrap_or(defaults.pyramid_scale),
            window: f.window.unwrap_or(defaults.window),
            iterations: f.iterations.unwrap_or(defaults.iterations),
            poly_n: f.poly_n.unwrap_or(defaults.poly_n),
            poly_sigma: f.poly_sigma.unwrap_or(defaults.poly_sigma),
        };
        flow.validate().map_err(|e| CliError::config(format!("flow: {e}")))?;

        let d = HdrParams::default();
        let h = self.hdr;
        let hdr = HdrParams {
            evs: h.evs,
            ev_gap: h.ev_gap,
            samples: h.samples.unwrap_or(d.samples),
            lambda: h.lambda.unwrap_or(d.lambda),
            key: h.key.unwrap_or(d.key),
            white: h.white,
            response: h.response.unwrap_or(d.response),
        };
        if hdr.key <= 0.0 || hdr.white.is_some_and(|w| w <= 0.0) || hdr.lambda < 0.0 || hdr.samples == 0 {
            return Err(CliError::config("hdr: key and white must be positive, lambda >= 0, samples >= 1"));
        }
        if hdr.ev_gap.is_some_and(|g| g <= 0.0) {
            return Err(CliError::config("hdr.ev_gap must be positive"));
        }

        let cfg = PipelineConfig {
            input,
            range,
            reference: self.reference,
            mode,
            bbox,
            blur_scale: self.blur_scale.unwrap_or(1.0),
            tau: self.tau.unwrap_or(DEFAULT_TAU),
            feather: self.feather.unwrap_or(DEFAULT_FEATHER),
            fix_anchor: self.fix_anchor.unwrap_or(false),
            out: self.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            debug: self.debug.unwrap_or(false),
            threads: self.threads,
            flow,
            hdr,
        };
        if !(cfg.blur_scale >= 0.0 && cfg.blur_scale.is_finite()) {
            return Err(CliError::config(format!("blur_scale must be >= 0, got {}", cfg.blur_scale)));
        }
        if !(cfg.tau >= 0.0 && cfg.tau.is_finite()) {
            return Err(CliError::config(format!("tau must be >= 0, got {}", cfg.tau)));
        }
        if cfg.threads == Some(0) {
            return Err(CliError::config("threads must be at least 1"));
        }
        Ok(cfg)
    }
}

/// Parses a complete configuration document.
pub fn parse_config(text: &str) -> Result<PipelineConfig, CliError> {
    PartialConfig::parse(text)?.resolve()
}
