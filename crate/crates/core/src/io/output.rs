//! Track, assignment and metrics files.
//!
//! `tracks.jsonl`: a header `{"format":"airtrack.tracks","version":1}`,
//! then one line per track and frame, sorted by track then frame:
//! `{"track_id":0,"frame_index":3,"x":..,"y":..,"w":..,"h":..}` with the box
//! in pixels, top-left corner first. Ground truth uses the same format.
//!
//! `assignments.jsonl`: a header `{"format":"airtrack.assignments","version":1}`,
//! then one line per emitted assignment in frame order:
//! `{"frame_index":..,"track_id":..,"detection_id":..,"fused":..,"scores":[{"comparator":..,"raw":..,"normalized":..}]}`.
//! `detection_id` and `fused` are `null` on a missed frame.
//!
//! `metrics.csv`: header `mode,eao,precision,recall,absence_accuracy`,
//! then one row for `ouid` and one for `auid`. Numbers use the shortest
//! decimal form that reads back to the same value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{IdMode, MetricsRow};
use crate::model::{Assignment, BoundingBox, TrackId, TrackRecord};
use crate::visual::AttentionMaps;

pub const TRACKS_FORMAT: &str = "airtrack.tracks";
pub const ASSIGNMENTS_FORMAT: &str = "airtrack.assignments";
pub const METRICS_HEADER: &str = "mode,eao,precision,recall,absence_accuracy";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackLine {
    track_id: TrackId,
    frame_index: u64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn write_header(w: &mut impl Write, format: &str) -> Result<()> {
    serde_json::to_writer(
        &mut *w,
        &Header {
            format: format.into(),
            version: 1,
        },
    )?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Non-empty lines after a checked header, with their 1-based numbers.
fn body_lines(path: &Path, format: &str) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            let h: Header = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, format!("bad header: {e}")))?;
            if h.format != format || h.version != 1 {
                return Err(parse_err(path, i + 1, format!("expected {format} version 1")));
            }
            seen_header = true;
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

pub fn write_tracks(path: &Path, tracks: &[TrackRecord]) -> Result<()> {
    let mut sorted: Vec<&TrackRecord> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.id);
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, TRACKS_FORMAT)?;
    for t in sorted {
        for (&frame_index, b) in &t.boxes {
            let line = TrackLine {
                track_id: t.id,
                frame_index,
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a tracks file; tracks come back sorted by id. An empty file
/// holds no tracks.
pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    let mut map: BTreeMap<TrackId, TrackRecord> = BTreeMap::new();
    for (n, line) in body_lines(path, TRACKS_FORMAT)? {
        let t: TrackLine = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        let b = BoundingBox::new(t.x, t.y, t.w, t.h).map_err(|e| parse_err(path, n, e.to_string()))?;
        let rec = map.entry(t.track_id).or_insert_with(|| TrackRecord::new(t.track_id));
        if rec.boxes.insert(t.frame_index, b).is_some() {
            return Err(parse_err(
                path,
                n,
                format!("track {} has two boxes at frame {}", t.track_id, t.frame_index),
            ));
        }
    }
    Ok(map.into_values().collect())
}

pub fn write_assignments(path: &Path, assignments: &[Assignment]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, ASSIGNMENTS_FORMAT)?;
    for a in assignments {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments(path: &Path) -> Result<Vec<Assignment>> {
    body_lines(path, ASSIGNMENTS_FORMAT)?
        .into_iter()
        .map(|(n, line)| serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string())))
        .collect()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode.as_str(),
            r.eao,
            r.precision,
            r.recall,
            r.absence_accuracy
        ));
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(parse_err(path, 1, "missing metrics header")),
    }
    let num = |s: &str, n: usize| s.parse::<f64>().map_err(|e| parse_err(path, n, e.to_string()));
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let n = i + 1;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return Err(parse_err(path, n, "expected 5 fields"));
            }
            let mode = match f[0] {
                "ouid" => IdMode::OUid,
                "auid" => IdMode::AUid,
                m => return Err(parse_err(path, n, format!("unknown mode `{m}`"))),
            };
            Ok(MetricsRow {
                mode,
                eao: num(f[1], n)?,
                precision: num(f[2], n)?,
                recall: num(f[3], n)?,
                absence_accuracy: num(f[4], n)?,
            })
        })
        .collect()
}

/// Writes the per-head attention maps side by side as one grayscale PNG,
/// each map scaled so its peak is white and enlarged `scale` times.
pub fn write_attention_png(path: &Path, maps: &AttentionMaps, scale: usize) -> Result<()> {
    let scale = scale.max(1);
    let (h, w) = (maps.height, maps.width);
    let heads = maps.maps.len();
    if heads == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidValue("no attention maps to write".into()));
    }
    let gap = 1;
    let width = heads * w * scale + (heads - 1) * gap;
    let height = h * scale;
    let mut data = vec![0u8; width * height];
    for (k, m) in maps.maps.iter().enumerate() {
        let peak = m.iter().copied().fold(0.0, f64::max).max(1e-12);
        let x0 = k * (w * scale + gap);
        for y in 0..height {
            for x in 0..w * scale {
                let v = m[(y / scale) * w + x / scale] / peak;
                data[y * width + x0 + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ComparatorScore;

    #[test]
    fn tracks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let mut a = TrackRecord::new(3);
        a.boxes.insert(0, BoundingBox::new(1.5, 2.25, 10.0, 20.0).unwrap());
        a.boxes.insert(4, BoundingBox::new(0.1, 0.2, 10.3, 20.7).unwrap());
        let mut b = TrackRecord::new(1);
        b.boxes.insert(2, BoundingBox::new(100.0 / 3.0, 5.0, 8.0, 9.0).unwrap());
        write_tracks(&p, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_tracks(&p).unwrap(), vec![b, a]);
    }

    #[test]
    fn duplicate_track_frames_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let line = r#"{"track_id":0,"frame_index":1,"x":0.0,"y":0.0,"w":1.0,"h":1.0}"#;
        std::fs::write(&p, format!("{{\"format\":\"airtrack.tracks\",\"version\":1}}\n{line}\n{line}\n")).unwrap();
        assert!(matches!(read_tracks(&p), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn assignments_round_trip_with_misses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let rows = vec![
            Assignment {
                frame_index: 2,
                track_id: 0,
                detection_id: Some(7),
                fused: Some(0.8125),
                scores: vec![ComparatorScore {
                    comparator: "ekf".into(),
                    raw: 1e-5,
                    normalized: 0.9,
                }],
            },
            Assignment {
                frame_index: 3,
                track_id: 0,
                detection_id: None,
                fused: None,
                scores: vec![],
            },
        ];
        write_assignments(&p, &rows).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("\"detection_id\":null"));
        assert_eq!(read_assignments(&p).unwrap(), rows);
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            MetricsRow {
                mode: IdMode::OUid,
                eao: 19.0 / 24.0,
                precision: 1.0,
                recall: 0.5,
                absence_accuracy: 1.0 / 3.0,
            },
            MetricsRow {
                mode: IdMode::AUid,
                eao: 0.0,
                precision: 1.0,
                recall: 0.0,
                absence_accuracy: 1.0,
            },
        ];
        write_metrics(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("mode,eao,precision,recall,absence_accuracy\nouid,"));
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }

    #[test]
    fn attention_png_has_one_panel_per_head() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("att.png");
        let maps = AttentionMaps {
            height: 2,
            width: 2,
            maps: vec![vec![0.25; 4], vec![1.0, 0.0, 0.0, 0.0]],
        };
        write_attention_png(&p, &maps, 3).unwrap();
        let chip = super::super::read_chip_png(&p).unwrap();
        assert_eq!((chip.width(), chip.height(), chip.channels()), (13, 6, 1));
        assert_eq!(chip.get(0, 0, 0), 1.0);
        assert_eq!(chip.get(7, 0, 0), 1.0);
        assert_eq!(chip.get(12, 5, 0), 0.0);
    }
}
