//! Line-delimited JSON detection files and PNG chips.
//!
//! The first line is a header object, every following line one detection:
//!
//! ```text
//! {"format":"airtrack.detections","version":1,"frame_width":320.0,"frame_height":240.0,"frames":120}
//! {"frame_index":0,"detection_id":0,"x":10.0,"y":20.0,"w":16.0,"h":36.0,"label":"person","confidence":1.0,"chip_path":"chips/000000.png"}
//! ```
//!
//! `x`, `y` are the top-left corner in pixels. `chip_path` is relative to
//! the file's directory. The platform fields `lon`, `lat`, `azimuth`,
//! `elevation`, `zoom` are optional but must appear together. Frames must
//! not decrease from one line to the next.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::appearance::NATIVE_CHIP_SIZE;
use crate::error::{Error, Result};
use crate::model::{BoundingBox, Chip, Detection, DetectionId, PlatformMeta};

pub const DETECTIONS_FORMAT: &str = "airtrack.detections";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionHeader {
    pub format: String,
    pub version: u32,
    pub frame_width: f64,
    pub frame_height: f64,
    /// Sequence length; frames without detections still count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<u64>,
}

impl DetectionHeader {
    pub fn new(frame_width: f64, frame_height: f64, frames: Option<u64>) -> Self {
        Self {
            format: DETECTIONS_FORMAT.into(),
            version: FORMAT_VERSION,
            frame_width,
            frame_height,
            frames,
        }
    }

    pub fn frame_dims(&self) -> (f64, f64) {
        (self.frame_width, self.frame_height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame_index: u64,
    pub detection_id: DetectionId,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub label: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chip_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub azimuth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoom: Option<f64>,
}

impl DetectionRecord {
    pub fn bbox(&self) -> Result<BoundingBox> {
        BoundingBox::new(self.x, self.y, self.w, self.h)
    }

    pub fn platform(&self) -> std::result::Result<Option<PlatformMeta>, String> {
        match (self.lon, self.lat, self.azimuth, self.elevation, self.zoom) {
            (None, None, None, None, None) => Ok(None),
            (Some(longitude), Some(latitude), Some(camera_azimuth), Some(camera_elevation), Some(zoom)) => {
                Ok(Some(PlatformMeta {
                    longitude,
                    latitude,
                    camera_azimuth,
                    camera_elevation,
                    zoom,
                }))
            }
            _ => Err("platform fields must be given all together or not at all".into()),
        }
    }

    pub fn set_platform(&mut self, p: Option<&PlatformMeta>) {
        self.lon = p.map(|p| p.longitude);
        self.lat = p.map(|p| p.latitude);
        self.azimuth = p.map(|p| p.camera_azimuth);
        self.elevation = p.map(|p| p.camera_elevation);
        self.zoom = p.map(|p| p.zoom);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionFile {
    pub header: DetectionHeader,
    pub records: Vec<DetectionRecord>,
}

/// Detections of one frame, in file order.
#[derive(Clone, Debug)]
pub struct Frame {
    pub frame_index: u64,
    pub detections: Vec<Arc<Detection>>,
}

#[derive(Clone, Debug)]
pub struct LoadedDetections {
    pub header: DetectionHeader,
    pub frames: Vec<Frame>,
    /// Non-fatal problems, such as chips that could not be found.
    pub warnings: Vec<String>,
}

impl LoadedDetections {
    /// Every frame index to process: `0..frames` when the header gives a
    /// length, else the span of frames present.
    pub fn frame_range(&self) -> std::ops::Range<u64> {
        match (self.header.frames, self.frames.first(), self.frames.last()) {
            (Some(n), ..) => 0..n.max(self.frames.last().map_or(0, |f| f.frame_index + 1)),
            (None, Some(a), Some(b)) => a.frame_index..b.frame_index + 1,
            _ => 0..0,
        }
    }

    pub fn detections(&self) -> impl Iterator<Item = &Arc<Detection>> {
        self.frames.iter().flat_map(|f| f.detections.iter())
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn write_detection_file(path: &Path, file: &DetectionFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &file.header)?;
    w.write_all(b"\n")?;
    for r in &file.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses header and records without touching chips. An empty file has
/// no header and no records; the header then defaults to a 320×240 frame.
pub fn read_detection_file(path: &Path) -> Result<DetectionFile> {
    let reader = BufReader::new(File::open(path)?);
    let mut header = None;
    let mut records: Vec<DetectionRecord> = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: DetectionHeader =
                serde_json::from_str(&line).map_err(|e| parse_err(path, n, format!("bad header: {e}")))?;
            if h.format != DETECTIONS_FORMAT {
                return Err(parse_err(path, n, format!("unknown format `{}`", h.format)));
            }
            if h.version != FORMAT_VERSION {
                return Err(parse_err(path, n, format!("unsupported version {}", h.version)));
            }
            if !(h.frame_width > 0.0 && h.frame_height > 0.0) {
                return Err(parse_err(path, n, "frame dimensions must be positive"));
            }
            header = Some(h);
            continue;
        }
        let r: DetectionRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        if let Some(prev) = records.last() {
            if r.frame_index < prev.frame_index {
                return Err(parse_err(
                    path,
                    n,
                    format!("frame {} follows frame {}", r.frame_index, prev.frame_index),
                ));
            }
        }
        if !ids.insert(r.detection_id) {
            return Err(parse_err(path, n, format!("duplicate detection_id {}", r.detection_id)));
        }
        r.bbox().map_err(|e| parse_err(path, n, e.to_string()))?;
        r.platform().map_err(|e| parse_err(path, n, e))?;
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(parse_err(path, n, format!("confidence {} outside [0, 1]", r.confidence)));
        }
        records.push(r);
    }
    Ok(DetectionFile {
        header: header.unwrap_or_else(|| DetectionHeader::new(320.0, 240.0, None)),
        records,
    })
}

/// Reads a detection file and its chips, grouped by frame.
///
/// A record without `chip_path`, or whose chip file is missing, gets an
/// all-zero chip and a warning.
pub fn load_detections(path: &Path) -> Result<LoadedDetections> {
    let file = read_detection_file(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut warnings = Vec::new();
    let mut frames: Vec<Frame> = Vec::new();
    for r in file.records {
        let chip = match &r.chip_path {
            Some(rel) => {
                let p = base.join(rel);
                if p.exists() {
                    read_chip_png(&p)?
                } else {
                    let msg = format!("detection {}: chip {} not found", r.detection_id, p.display());
                    log::warn!("{msg}");
                    warnings.push(msg);
                    zero_chip()
                }
            }
            None => {
                let msg = format!("detection {}: no chip_path", r.detection_id);
                log::warn!("{msg}");
                warnings.push(msg);
                zero_chip()
            }
        };
        let det = Arc::new(Detection {
            detection_id: r.detection_id,
            frame_index: r.frame_index,
            bbox: r.bbox()?,
            platform: r.platform().map_err(Error::InvalidValue)?,
            label: r.label,
            confidence: r.confidence,
            chip,
        });
        match frames.last_mut() {
            Some(f) if f.frame_index == det.frame_index => f.detections.push(det),
            _ => frames.push(Frame {
                frame_index: det.frame_index,
                detections: vec![det],
            }),
        }
    }
    Ok(LoadedDetections {
        header: file.header,
        frames,
        warnings,
    })
}

fn zero_chip() -> Chip {
    Chip::filled(NATIVE_CHIP_SIZE, NATIVE_CHIP_SIZE, 3, 0.0).expect("valid size")
}

/// Relative chip path used by writers: `chips/NNNNNN.png`.
pub fn chip_rel_path(id: DetectionId) -> String {
    format!("chips/{id:06}.png")
}

/// Writes an 8-bit PNG. Values are rounded to the nearest 1/255.
pub fn write_chip_png(path: &Path, chip: &Chip) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, chip.width() as u32, chip.height() as u32);
    enc.set_color(if chip.channels() == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = chip.pixels().iter().map(|p| (p * 255.0).round() as u8).collect();
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

/// Reads a PNG into a chip normalized to `[0, 1]`; alpha is dropped.
pub fn read_chip_png(path: &Path) -> Result<Chip> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let img_err = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(img_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(img_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (src, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Image(format!("{}: unexpanded palette", path.display()))),
    };
    let mut pixels = Vec::with_capacity(w * h * keep);
    for row in buf[..info.line_size * h].chunks(info.line_size) {
        for px in row[..w * src].chunks(src) {
            pixels.extend(px[..keep].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Chip::new(w, h, keep, pixels)
}

/// Joins `rel` onto the directory holding `file`.
pub fn resolve_relative(file: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        file.parent().unwrap_or(Path::new("")).join(rel)
    }
}
