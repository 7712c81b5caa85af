//! Selective motion blur, panning-shot and HDR synthesis from short-exposure
//! frame sequences.
//!
//! The stages are independent modules so that each can be run and tested on
//! its own:
//!
//! - [`imagekit`]: raster types, sRGB I/O, convolution.
//! - [`colorxfer`]: linear optimal-transport color transfer from a reference photo.
//! - [`layersep`]: rank-1 background extraction and foreground masks.
//! - [`optflow`]: dense polynomial-expansion optical flow.
//! - [`trackctl`]: bounding-box propagation along the flow.
//! - [`blurfx`]: line kernels, masked compositing and effect rendering.
//! - [`hdrmerge`]: response recovery, radiance merging, tone mapping and PFM output.
//! - [`synthgen`]: deterministic synthetic scenes used as ground truth.

pub mod blurfx;
pub mod colorxfer;
pub mod error;
pub mod hdrmerge;
pub mod imagekit;
pub mod layersep;
pub mod optflow;
pub mod synthgen;
pub mod trackctl;

pub use error::{Error, Result};
pub use imagekit::{BlurKernel, BorderPolicy, Image, Plane};
