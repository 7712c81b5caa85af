use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use motionfx_cli::config::{PartialConfig, PartialFlow, PartialHdr, ResponseSource};
use motionfx_cli::{run_pipeline, CliError, Mode, PipelineConfig};

const DEFAULTS: &str = "\
Configuration precedence: flags, then the --config TOML file, then defaults.
Defaults: blur_scale 1.0, tau 0.08, feather 2, fix_anchor false, out \"out\",
flow.pyramid_levels 3, flow.pyramid_scale 0.5, flow.window 15, flow.iterations 3,
flow.poly_n 7, flow.poly_sigma 1.5, hdr.samples 200, hdr.lambda 50, hdr.key 0.18,
hdr.white = 99.5th luminance percentile, hdr.response \"recover\".
Exit codes: 0 success, 2 config error, 3 I/O error, 4 numerical error.";

#[derive(Parser)]
#[command(name = "motionfx", version, about = "Selective motion blur and HDR from fast-shutter frame sequences", after_help = DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Blur the background against the tracked subject's motion
    Panning(Args),
    /// Freeze a blurred background behind the moving subject
    Cinemagraph(Args),
    /// Blur whole frames along the tracked motion
    Blur(Args),
    /// Merge exposure stacks into radiance maps (PFM) with tone-mapped previews
    Hdr(Args),
    /// Write rank-1 backgrounds and foreground masks
    Separate(Args),
    /// Write optical-flow visualizations for consecutive frames
    Flow(Args),
}

#[derive(clap::Args)]
#[command(after_help = DEFAULTS)]
struct Args {
    /// Frame path pattern, e.g. frames/f_%04d.png
    #[arg(long)]
    input: Option<String>,
    /// Inclusive frame index range a..b [default: contiguous files from 0 or 1]
    #[arg(long)]
    range: Option<String>,
    /// Properly exposed reference photo for color transfer
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Subject bounding box in the first frame: x,y,w,h
    #[arg(long)]
    bbox: Option<String>,
    /// Blur length per pixel of motion [default: 1.0]
    #[arg(long)]
    blur_scale: Option<f64>,
    /// Luminance difference threshold for foreground masks [default: 0.08]
    #[arg(long)]
    tau: Option<f64>,
    /// Mask feather radius in pixels [default: 2]
    #[arg(long)]
    feather: Option<usize>,
    /// Keep the tracked box center fixed across output frames
    #[arg(long)]
    fix_anchor: bool,
    /// Exposure values of a bracketed input, comma separated (hdr)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    evs: Option<Vec<f64>>,
    /// Stops between raw and compensated frames [default: estimated] (hdr)
    #[arg(long, allow_hyphen_values = true)]
    ev_gap: Option<f64>,
    /// Response smoothness weight [default: 50] (hdr)
    #[arg(long)]
    lambda: Option<f64>,
    /// Use a linear camera response instead of recovering it (hdr)
    #[arg(long)]
    linear_response: bool,
    /// Output directory [default: out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads [default: all cores]
    #[arg(long)]
    threads: Option<usize>,
    /// Write intermediate layers, kernels, tracks and responses
    #[arg(long)]
    debug: bool,
}

impl Command {
    fn split(self) -> (Mode, Args) {
        match self {
            Command::Panning(a) => (Mode::Panning, a),
            Command::Cinemagraph(a) => (Mode::Cinemagraph, a),
            Command::Blur(a) => (Mode::Blur, a),
            Command::Hdr(a) => (Mode::Hdr, a),
            Command::Separate(a) => (Mode::Separate, a),
            Command::Flow(a) => (Mode::Flow, a),
        }
    }
}

fn flags(mode: Mode, a: Args) -> PartialConfig {
    PartialConfig {
        input: a.input,
        range: a.range,
        reference: a.reference,
        mode: Some(mode),
        bbox: a.bbox,
        blur_scale: a.blur_scale,
        tau: a.tau,
        feather: a.feather,
        fix_anchor: a.fix_anchor.then_some(true),
        out: a.out,
        debug: a.debug.then_some(true),
        threads: a.threads,
        flow: PartialFlow::default(),
        hdr: PartialHdr {
            evs: a.evs,
            ev_gap: a.ev_gap,
            lambda: a.lambda,
            response: a.linear_response.then_some(ResponseSource::Linear),
            ..PartialHdr::default()
        },
    }
}

fn configure(command: Command) -> Result<PipelineConfig, CliError> {
    let (mode, args) = command.split();
    let file = match &args.config {
        Some(path) => PartialConfig::load(path)?,
        None => PartialConfig::default(),
    };
    file.overlay(flags(mode, args)).resolve()
}

fn run(cfg: &PipelineConfig) -> Result<usize, CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let report = pool.install(|| run_pipeline(cfg))?;
    Ok(report.frames_written)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match configure(cli.command) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = if cfg.debug { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cfg) {
        Ok(n) => {
            println!("{} mode: wrote {n} frame(s) to {}", cfg.mode, cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
