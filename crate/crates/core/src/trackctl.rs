//! Bounding-box tracking by averaging optical flow inside the box.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{contract, Result};
use crate::imagekit::Image;
use crate::optflow::{farneback_flow, mean_flow, median_flow, FlowField, FlowParams, Region};

/// Axis-aligned box in pixel units; pixel `x` spans `[x, x + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
            return Err(contract(format!("invalid bounding box {x},{y},{w},{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x + self.w / 2.0, self.y + self.h / 2.0]
    }

    pub fn translated(&self, d: [f64; 2]) -> Self {
        Self { x: self.x + d[0], y: self.y + d[1], ..*self }
    }

    /// Area of the intersection with a `width x height` frame.
    pub fn overlap_area(&self, width: usize, height: usize) -> f64 {
        let ox = (self.x + self.w).min(width as f64) - self.x.max(0.0);
        let oy = (self.y + self.h).min(height as f64) - self.y.max(0.0);
        ox.max(0.0) * oy.max(0.0)
    }

    /// Shifts the box (size unchanged) so that at least 1 px along each
    /// axis stays inside the frame.
    pub fn clamped(&self, width: usize, height: usize) -> Self {
        let clamp_axis = |v: f64, size: f64, extent: usize| {
            let lo = 1.0 - size;
            let hi = extent as f64 - 1.0;
            v.clamp(lo, hi.max(lo))
        };
        Self { x: clamp_axis(self.x, self.w, width), y: clamp_axis(self.y, self.h, height), ..*self }
    }
}

impl std::str::FromStr for BoundingBox {
    type Err = crate::Error;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| contract(format!("bounding box {s:?}: {e}")))?;
        match parts.as_slice() {
            [x, y, w, h] => Self::new(*x, *y, *w, *h),
            _ => Err(contract(format!("bounding box {s:?} must have four comma-separated numbers"))),
        }
    }
}

/// How the flow inside the box is summarized into one motion vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MotionStatistic {
    #[default]
    Mean,
    Median,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    /// One box per frame; `boxes[0]` is the user's box.
    pub boxes: Vec<BoundingBox>,
    /// Box motion between frames `t` and `t + 1`.
    pub motions: Vec<[f64; 2]>,
}

impl TrackResult {
    /// Line-oriented dump: `box t x y w h` and `motion t dx dy`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, b) in self.boxes.iter().enumerate() {
            let _ = writeln!(s, "box {t} {:.6} {:.6} {:.6} {:.6}", b.x, b.y, b.w, b.h);
        }
        for (t, m) in self.motions.iter().enumerate() {
            let _ = writeln!(s, "motion {t} {:.6} {:.6}", m[0], m[1]);
        }
        s
    }

    /// Mean of all frame-to-frame motions.
    pub fn mean_motion(&self) -> [f64; 2] {
        if self.motions.is_empty() {
            return [0.0, 0.0];
        }
        let n = self.motions.len() as f64;
        let sum = self.motions.iter().fold([0.0, 0.0], |a, m| [a[0] + m[0], a[1] + m[1]]);
        [sum[0] / n, sum[1] / n]
    }
}

fn summarize(flow: &FlowField, b: &BoundingBox, stat: MotionStatistic) -> Result<[f64; 2]> {
    match stat {
        MotionStatistic::Mean => mean_flow(flow, Region::Box(*b)),
        MotionStatistic::Median => median_flow(flow, Region::Box(*b)),
    }
}

/// Moves the box by the mean flow inside it, then clamps it to the frame.
/// Returns the new box and the applied motion.
pub fn propagate_bbox_with(b: &BoundingBox, flow: &FlowField, stat: MotionStatistic) -> Result<(BoundingBox, [f64; 2])> {
    let (w, h) = (flow.width(), flow.height());
    let start = b.clamped(w, h);
    let motion = summarize(flow, &start, stat)?;
    Ok((start.translated(motion).clamped(w, h), motion))
}

pub fn propagate_bbox(b: &BoundingBox, flow: &FlowField) -> Result<BoundingBox> {
    propagate_bbox_with(b, flow, MotionStatistic::Mean).map(|(b, _)| b)
}

/// Tracks `box0` through the clip. Pairwise flows are independent of the box
/// and computed in parallel; propagation is sequential.
pub fn track_sequence_with(frames: &[Image], box0: BoundingBox, params: &FlowParams, stat: MotionStatistic) -> Result<TrackResult> {
    if frames.len() < 2 {
        return Err(contract(format!("tracking needs at least 2 frames, got {}", frames.len())));
    }
    let first = &frames[0];
    if box0.overlap_area(first.width(), first.height()) <= 0.0 {
        return Err(contract("initial bounding box lies outside the frame"));
    }
    let flows: Vec<FlowField> = frames.par_windows(2).map(|pair| farneback_flow(&pair[0], &pair[1], params)).collect::<Result<_>>()?;

    let mut boxes = vec![box0];
    let mut motions = Vec::with_capacity(flows.len());
    for flow in &flows {
        let (next, motion) = propagate_bbox_with(boxes.last().expect("non-empty"), flow, stat)?;
        boxes.push(next);
        motions.push(motion);
    }
    Ok(TrackResult { boxes, motions })
}

pub fn track_sequence(frames: &[Image], box0: BoundingBox, params: &FlowParams) -> Result<TrackResult> {
    track_sequence_with(frames, box0, params, MotionStatistic::Mean)
}
