//! Shared domain types: boxes, image chips, detections and tracklets.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};

/// Axis-aligned box in pixel coordinates, `(x, y)` being the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::NonFiniteInput("bounding box"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "box extent must be positive, got {w}x{h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from its center and extent.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two boxes. Symmetric, in `[0, 1]`, and 0 for
/// disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Row-major image patch with values normalized to `[0, 1]`.
///
/// Pixel `(x, y)` of channel `c` lives at `(y * width + x) * channels + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Chip {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidValue("chip dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidValue(format!(
                "chip must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(dim_mismatch(width * height * channels, pixels.len()));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidValue("chip pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Channel mean, as a single-channel chip.
    pub fn to_grayscale(&self) -> Chip {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks_exact(self.channels)
            .map(|px| (px.iter().sum::<f64>() / self.channels as f64).clamp(0.0, 1.0))
            .collect();
        Chip {
            width: self.width,
            height: self.height,
            channels: 1,
            pixels,
        }
    }

    /// Planar `[channel][y][x]` layout used by the convolutional encoders.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.pixels.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + i] = *v;
            }
        }
        out
    }
}

/// Bilinear resize using pixel-center alignment with edge clamping.
///
/// A same-size resize returns the input unchanged, and a constant chip stays
/// constant for any target size.
pub fn resize_chip(chip: &Chip, target_w: usize, target_h: usize) -> Result<Chip> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidValue("resize target must be positive".into()));
    }
    if target_w == chip.width && target_h == chip.height {
        return Ok(chip.clone());
    }
    let xs = sample_positions(chip.width, target_w);
    let ys = sample_positions(chip.height, target_h);
    let ch = chip.channels;
    let mut pixels = Vec::with_capacity(target_w * target_h * ch);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let top = lerp(chip.get(x0, y0, c), chip.get(x1, y0, c), fx);
                let bottom = lerp(chip.get(x0, y1, c), chip.get(x1, y1, c), fx);
                pixels.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Chip {
        width: target_w,
        height: target_h,
        channels: ch,
        pixels,
    })
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// For each destination index: the two source neighbours and the blend weight.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Sensor platform metadata attached to a detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformMeta {
    pub longitude: f64,
    pub latitude: f64,
    pub camera_azimuth: f64,
    pub camera_elevation: f64,
    pub zoom: f64,
}

impl PlatformMeta {
    pub fn validate(&self) -> Result<()> {
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::InvalidValue(format!("longitude {}", self.longitude)));
        }
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::InvalidValue(format!("latitude {}", self.latitude)));
        }
        if !(self.zoom > 0.0) {
            return Err(Error::InvalidValue(format!("zoom {}", self.zoom)));
        }
        Ok(())
    }
}

pub type DetectionId = u64;
pub type TrackId = u64;

/// One detector output: a box, a label, and the image chip inside the box.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub detection_id: DetectionId,
    pub frame_index: u64,
    pub bbox: BoundingBox,
    pub label: String,
    pub confidence: f64,
    pub chip: Chip,
    pub platform: Option<PlatformMeta>,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidValue(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if let Some(p) = &self.platform {
            p.validate()?;
        }
        Ok(())
    }
}

/// A partial track: associated detections in strictly increasing frame order.
#[derive(Clone, Debug)]
pub struct Tracklet {
    pub track_id: TrackId,
    observations: Vec<Arc<Detection>>,
    pub misses: u32,
}

impl Tracklet {
    pub fn new(track_id: TrackId, first: Arc<Detection>) -> Self {
        Self {
            track_id,
            observations: vec![first],
            misses: 0,
        }
    }

    pub fn push(&mut self, det: Arc<Detection>) -> Result<()> {
        let last = self.last_update_frame();
        if det.frame_index <= last {
            return Err(Error::FrameOrderViolation {
                last,
                got: det.frame_index,
            });
        }
        self.observations.push(det);
        self.misses = 0;
        Ok(())
    }

    pub fn observations(&self) -> &[Arc<Detection>] {
        &self.observations
    }

    pub fn last(&self) -> &Arc<Detection> {
        self.observations.last().expect("tracklet is never empty")
    }

    pub fn last_update_frame(&self) -> u64 {
        self.last().frame_index
    }
}

/// Output of one signature comparator for a (tracklet, detection) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparatorScore {
    pub comparator: String,
    pub raw: f64,
    /// Similarity in `[0, 1]`.
    pub normalized: f64,
}

/// One track's decision for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub frame_index: u64,
    pub track_id: TrackId,
    /// `None` when the track missed this frame.
    pub detection_id: Option<DetectionId>,
    pub fused: Option<f64>,
    pub scores: Vec<ComparatorScore>,
}

/// Boxes of one track keyed by frame; absent frames are missing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: TrackId,
    pub boxes: BTreeMap<u64, BoundingBox>,
}

impl TrackRecord {
    pub fn new(id: TrackId) -> Self {
        Self {
            id,
            boxes: BTreeMap::new(),
        }
    }

    pub fn from_detections(id: TrackId, dets: &[Arc<Detection>]) -> Self {
        Self {
            id,
            boxes: dets.iter().map(|d| (d.frame_index, d.bbox)).collect(),
        }
    }
}

/// Frame-by-frame data association.
pub trait Associator {
    /// Consumes every detection of `frame`; frames must strictly increase.
    fn process_frame(&mut self, frame: u64, detections: &[Arc<Detection>]) -> Result<Vec<Assignment>>;

    /// Final tracks once the sequence has ended.
    fn finish(&mut self) -> Vec<TrackRecord>;
}
