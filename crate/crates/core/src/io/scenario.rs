//! Seeded synthetic scenarios: moving people with procedural chips,
//! occlusions, camera drift and zoom, and matching ground truth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::detections::{
    chip_rel_path, write_chip_png, write_detection_file, DetectionFile, DetectionHeader, DetectionRecord,
};
use super::output::write_tracks;
use crate::appearance::{render_chip, Appearance, Nuisance, NATIVE_CHIP_SIZE};
use crate::error::{Error, Result};
use crate::model::{BoundingBox, Chip, DetectionId, PlatformMeta, TrackRecord};

pub const PRESETS: [&str; 2] = ["walkers", "runners"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Linear,
    /// Heading turns by `turn_rate` radians every frame.
    Curved { turn_rate: f64 },
    /// Linear, plus a sideways move of `offset` spread evenly over
    /// frames `start..=end`.
    Crossing { offset: [f64; 2], start: u64, end: u64 },
}

/// Identity of an object: a texture class shared across scenarios plus
/// per-object color jitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceSpec {
    pub class: u32,
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub motion: Motion,
    pub appearance: AppearanceSpec,
    /// Box width and height at zoom 1.
    pub size: [f64; 2],
    /// Inclusive frame ranges without detections.
    #[serde(default)]
    pub occlusions: Vec<[u64; 2]>,
    #[serde(default)]
    pub enter: u64,
    #[serde(default)]
    pub exit: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    /// Image shift per frame, in pixels; scene content moves the other way.
    pub drift: [f64; 2],
    /// Relative zoom change per frame about the frame center.
    pub zoom_rate: f64,
}

/// What ground truth records while an object is occluded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionTruth {
    /// The object counts as absent.
    #[default]
    Absent,
    /// The object is present but the detector misses it.
    Undetected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Std of the detected box center, pixels.
    pub position: f64,
    /// Std of the detected box size, pixels.
    pub size: f64,
    /// Chip nuisance strength in `[0, 1]`.
    pub nuisance: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            position: 1.0,
            size: 0.5,
            nuisance: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub frames: u64,
    pub frame_width: f64,
    pub frame_height: f64,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub occlusion_truth: OcclusionTruth,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Mean number of false detections per frame.
    #[serde(default)]
    pub clutter_rate: f64,
    #[serde(default = "default_chip_size")]
    pub chip_size: usize,
    /// Platform metadata attached to every detection when set.
    #[serde(default)]
    pub platform: Option<PlatformMeta>,
    pub seed: u64,
}

fn default_chip_size() -> usize {
    NATIVE_CHIP_SIZE
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return bad("frame dimensions must be positive".into());
        }
        if self.chip_size < 4 {
            return bad(format!("chip_size {} is too small", self.chip_size));
        }
        let n = &self.noise;
        if !(n.position >= 0.0 && n.size >= 0.0 && (0.0..=1.0).contains(&n.nuisance)) {
            return bad("noise levels must be non-negative and nuisance in [0, 1]".into());
        }
        if !(self.clutter_rate >= 0.0 && self.clutter_rate.is_finite()) {
            return bad("clutter_rate must be non-negative".into());
        }
        if !(self.camera.zoom_rate > -1.0) {
            return bad("zoom_rate must exceed -1".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size[0] > 0.0 && o.size[1] > 0.0) {
                return bad(format!("object {i}: size must be positive"));
            }
            if o.exit.is_some_and(|e| e < o.enter) {
                return bad(format!("object {i}: exit before enter"));
            }
            for w in &o.occlusions {
                if w[0] > w[1] || w[1] >= self.frames {
                    return bad(format!("object {i}: occlusion {w:?} outside 0..{}", self.frames));
                }
            }
            if let Motion::Crossing { start, end, .. } = o.motion {
                if start > end {
                    return bad(format!("object {i}: crossing starts after it ends"));
                }
            }
            if !(o.appearance.jitter >= 0.0) {
                return bad(format!("object {i}: jitter must be non-negative"));
            }
        }
        if let Some(p) = &self.platform {
            p.validate().map_err(|e| Error::Spec(e.to_string()))?;
        }
        Ok(())
    }
}

/// Base appearance of a texture class; identical across seeds.
pub fn class_appearance(class: u32) -> Appearance {
    Appearance::random(&mut ChaCha8Rng::seed_from_u64(0xa11e_0000 ^ u64::from(class)))
}

impl ObjectSpec {
    /// Scene position at `frame`, before the camera.
    pub fn position(&self, frame: u64) -> [f64; 2] {
        let t = frame.saturating_sub(self.enter) as f64;
        let [x, y] = self.start;
        let [vx, vy] = self.velocity;
        match self.motion {
            Motion::Linear => [x + vx * t, y + vy * t],
            Motion::Curved { turn_rate } => {
                let (mut px, mut py) = (x, y);
                for k in 0..frame.saturating_sub(self.enter) {
                    let (s, c) = (turn_rate * k as f64).sin_cos();
                    px += vx * c - vy * s;
                    py += vx * s + vy * c;
                }
                [px, py]
            }
            Motion::Crossing { offset, start, end } => {
                let frac = if frame < start {
                    0.0
                } else if frame >= end {
                    1.0
                } else {
                    (frame - start) as f64 / (end - start) as f64
                };
                [x + vx * t + offset[0] * frac, y + vy * t + offset[1] * frac]
            }
        }
    }

    fn occluded(&self, frame: u64) -> bool {
        self.occlusions.iter().any(|w| (w[0]..=w[1]).contains(&frame))
    }

    fn active(&self, frame: u64) -> bool {
        frame >= self.enter && self.exit.is_none_or(|e| frame <= e)
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub detections: DetectionFile,
    /// Chip of every detection, in record order.
    pub chips: Vec<(DetectionId, Chip)>,
    pub ground_truth: Vec<TrackRecord>,
    pub appearances: Vec<Appearance>,
}

/// Renders the scenario. The same spec always yields identical output.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let appearances: Vec<Appearance> = spec
        .objects
        .iter()
        .map(|o| {
            let base = class_appearance(o.appearance.class);
            if o.appearance.jitter > 0.0 {
                base.jittered(o.appearance.jitter, &mut rng)
            } else {
                base
            }
        })
        .collect();
    let clutter = (spec.clutter_rate > 0.0).then(|| Poisson::new(spec.clutter_rate).expect("positive rate"));
    let (fw, fh) = (spec.frame_width, spec.frame_height);

    let mut gt: Vec<TrackRecord> = (0..spec.objects.len()).map(|i| TrackRecord::new(i as u64)).collect();
    let mut records = Vec::new();
    let mut chips = Vec::new();
    let mut next_id: DetectionId = 0;
    for f in 0..spec.frames {
        let zoom = (1.0 + spec.camera.zoom_rate).powf(f as f64);
        let platform = spec.platform.map(|p| PlatformMeta {
            camera_azimuth: p.camera_azimuth + 0.05 * spec.camera.drift[0] * f as f64,
            camera_elevation: p.camera_elevation - 0.05 * spec.camera.drift[1] * f as f64,
            zoom: p.zoom * zoom,
            ..p
        });
        for (i, o) in spec.objects.iter().enumerate() {
            if !o.active(f) {
                continue;
            }
            let [px, py] = o.position(f);
            let cx = fw / 2.0 + zoom * (px - fw / 2.0) - spec.camera.drift[0] * f as f64;
            let cy = fh / 2.0 + zoom * (py - fh / 2.0) - spec.camera.drift[1] * f as f64;
            if !(0.0..=fw).contains(&cx) || !(0.0..=fh).contains(&cy) {
                continue;
            }
            let (w, h) = (o.size[0] * zoom, o.size[1] * zoom);
            let truth = BoundingBox::from_center(cx, cy, w, h)?;
            let occluded = o.occluded(f);
            if !occluded || spec.occlusion_truth == OcclusionTruth::Undetected {
                gt[i].boxes.insert(f, truth);
            }
            if occluded {
                continue;
            }
            let dx = gauss(spec.noise.position, &mut rng);
            let dy = gauss(spec.noise.position, &mut rng);
            let dw = gauss(spec.noise.size, &mut rng);
            let dh = gauss(spec.noise.size, &mut rng);
            let bbox = BoundingBox::from_center(cx + dx, cy + dy, (w + dw).max(2.0), (h + dh).max(2.0))?;
            let nz = Nuisance::random(spec.noise.nuisance, &mut rng);
            let chip = render_chip(&appearances[i], &nz, spec.chip_size, &mut rng);
            push_record(&mut records, &mut chips, &mut next_id, f, bbox, 1.0, chip, platform.as_ref());
        }
        if let Some(dist) = &clutter {
            let k = dist.sample(&mut rng) as usize;
            for _ in 0..k {
                let w = rng.random_range(10.0..24.0);
                let h = rng.random_range(24.0..48.0);
                let bbox = BoundingBox::from_center(rng.random_range(0.0..fw), rng.random_range(0.0..fh), w, h)?;
                let app = Appearance::random(&mut rng);
                let nz = Nuisance::random(spec.noise.nuisance, &mut rng);
                let chip = render_chip(&app, &nz, spec.chip_size, &mut rng);
                let conf = rng.random_range(0.3..0.7);
                push_record(&mut records, &mut chips, &mut next_id, f, bbox, conf, chip, platform.as_ref());
            }
        }
    }
    Ok(Scenario {
        spec: spec.clone(),
        detections: DetectionFile {
            header: DetectionHeader::new(fw, fh, Some(spec.frames)),
            records,
        },
        chips,
        ground_truth: gt,
        appearances,
    })
}

/// Zero-mean normal draw; no draw at all when `std` is zero.
fn gauss(std: f64, rng: &mut ChaCha8Rng) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("valid std").sample(rng)
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn push_record(
    records: &mut Vec<DetectionRecord>,
    chips: &mut Vec<(DetectionId, Chip)>,
    next_id: &mut DetectionId,
    frame: u64,
    bbox: BoundingBox,
    confidence: f64,
    chip: Chip,
    platform: Option<&PlatformMeta>,
) {
    let id = *next_id;
    *next_id += 1;
    let mut r = DetectionRecord {
        frame_index: frame,
        detection_id: id,
        x: bbox.x,
        y: bbox.y,
        w: bbox.w,
        h: bbox.h,
        label: "person".into(),
        confidence,
        chip_path: Some(chip_rel_path(id)),
        lon: None,
        lat: None,
        azimuth: None,
        elevation: None,
        zoom: None,
    };
    r.set_platform(platform);
    records.push(r);
    chips.push((id, chip));
}

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GROUND_TRUTH_FILE: &str = "gt.jsonl";
pub const SCENARIO_FILE: &str = "scenario.json";

impl Scenario {
    /// Writes `detections.jsonl`, `chips/`, `gt.jsonl` and `scenario.json`
    /// into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("chips"))?;
        write_detection_file(&dir.join(DETECTIONS_FILE), &self.detections)?;
        for (id, chip) in &self.chips {
            write_chip_png(&dir.join(chip_rel_path(*id)), chip)?;
        }
        write_tracks(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth)?;
        let mut spec = serde_json::to_string_pretty(&self.spec)?;
        spec.push('\n');
        std::fs::write(dir.join(SCENARIO_FILE), spec)?;
        Ok(())
    }

    /// The detections as the loader would return them, without disk I/O.
    pub fn loaded(&self) -> Result<super::LoadedDetections> {
        let mut frames: Vec<super::Frame> = Vec::new();
        for (r, (_, chip)) in self.detections.records.iter().zip(&self.chips) {
            let det = std::sync::Arc::new(crate::model::Detection {
                detection_id: r.detection_id,
                frame_index: r.frame_index,
                bbox: r.bbox()?,
                label: r.label.clone(),
                confidence: r.confidence,
                chip: chip.clone(),
                platform: r.platform().map_err(Error::InvalidValue)?,
            });
            match frames.last_mut() {
                Some(f) if f.frame_index == r.frame_index => f.detections.push(det),
                _ => frames.push(super::Frame {
                    frame_index: r.frame_index,
                    detections: vec![det],
                }),
            }
        }
        Ok(super::LoadedDetections {
            header: self.detections.header.clone(),
            frames,
            warnings: Vec::new(),
        })
    }
}

/// Named scenario with the given seed.
///
/// `walkers`: three people with distinct clothing crossing a field under a
/// slow zoom; one is hidden for ten frames. `runners`: two similarly
/// dressed people running side by side who swap lanes while both are
/// hidden for ten frames.
pub fn preset(name: &str, seed: u64) -> Result<ScenarioSpec> {
    let spec = match name {
        "walkers" => ScenarioSpec {
            name: name.into(),
            frames: 124,
            frame_width: 320.0,
            frame_height: 240.0,
            objects: vec![
                ObjectSpec {
                    start: [30.0, 120.0],
                    velocity: [1.6, 0.3],
                    motion: Motion::Linear,
                    appearance: AppearanceSpec { class: 1, jitter: 0.0 },
                    size: [16.0, 38.0],
                    occlusions: vec![[50, 59]],
                    enter: 0,
                    exit: None,
                },
                ObjectSpec {
                    start: [280.0, 70.0],
                    velocity: [-1.4, 0.5],
                    motion: Motion::Curved { turn_rate: 0.004 },
                    appearance: AppearanceSpec { class: 2, jitter: 0.0 },
                    size: [15.0, 36.0],
                    occlusions: vec![],
                    enter: 0,
                    exit: None,
                },
                ObjectSpec {
                    start: [150.0, 200.0],
                    velocity: [0.4, -0.9],
                    motion: Motion::Linear,
                    appearance: AppearanceSpec { class: 3, jitter: 0.0 },
                    size: [17.0, 40.0],
                    occlusions: vec![],
                    enter: 0,
                    exit: None,
                },
            ],
            camera: CameraSpec {
                drift: [0.0, 0.0],
                zoom_rate: 0.002,
            },
            occlusion_truth: OcclusionTruth::Absent,
            noise: NoiseSpec::default(),
            clutter_rate: 0.0,
            chip_size: NATIVE_CHIP_SIZE,
            platform: None,
            seed,
        },
        "runners" => {
            let runner = |start: [f64; 2], speed: f64, dy: f64| ObjectSpec {
                start,
                velocity: [speed, 0.0],
                motion: Motion::Crossing {
                    offset: [0.0, dy],
                    start: 41,
                    end: 50,
                },
                appearance: AppearanceSpec { class: 7, jitter: 0.12 },
                size: [16.0, 36.0],
                occlusions: vec![[41, 50]],
                enter: 0,
                exit: None,
            };
            ScenarioSpec {
                name: name.into(),
                frames: 120,
                frame_width: 320.0,
                frame_height: 240.0,
                objects: vec![runner([20.0, 105.0], 2.4, 30.0), runner([12.0, 135.0], 2.5, -30.0)],
                camera: CameraSpec::default(),
                occlusion_truth: OcclusionTruth::Absent,
                noise: NoiseSpec {
                    position: 1.0,
                    size: 0.5,
                    nuisance: 0.6,
                },
                clutter_rate: 0.0,
                chip_size: NATIVE_CHIP_SIZE,
                platform: None,
                seed,
            }
        }
        other => return Err(Error::Spec(format!("unknown preset `{other}`; expected one of {PRESETS:?}"))),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_spec() -> ScenarioSpec {
        ScenarioSpec {
            name: "line".into(),
            frames: 20,
            frame_width: 320.0,
            frame_height: 240.0,
            objects: vec![ObjectSpec {
                start: [50.0, 60.0],
                velocity: [2.0, 0.5],
                motion: Motion::Linear,
                appearance: AppearanceSpec { class: 0, jitter: 0.0 },
                size: [16.0, 32.0],
                occlusions: vec![[5, 7]],
                enter: 0,
                exit: None,
            }],
            camera: CameraSpec::default(),
            occlusion_truth: OcclusionTruth::Absent,
            noise: NoiseSpec {
                position: 0.0,
                size: 0.0,
                nuisance: 0.0,
            },
            clutter_rate: 0.0,
            chip_size: 16,
            platform: None,
            seed: 1,
        }
    }

    #[test]
    fn noiseless_linear_detections_lie_on_the_line() {
        let s = generate_scenario(&line_spec()).unwrap();
        assert_eq!(s.detections.records.len(), 17);
        for r in &s.detections.records {
            let (cx, cy) = r.bbox().unwrap().center();
            let t = r.frame_index as f64;
            assert_eq!((cx, cy), (50.0 + 2.0 * t, 60.0 + 0.5 * t));
            assert!(!(5..=7).contains(&r.frame_index));
        }
        assert_eq!(s.ground_truth[0].boxes.len(), 17);
    }

    #[test]
    fn undetected_occlusions_stay_in_ground_truth() {
        let mut spec = line_spec();
        spec.occlusion_truth = OcclusionTruth::Undetected;
        let s = generate_scenario(&spec).unwrap();
        assert_eq!(s.ground_truth[0].boxes.len(), 20);
        assert_eq!(s.detections.records.len(), 17);
    }

    #[test]
    fn same_seed_same_scenario() {
        for name in PRESETS {
            let a = generate_scenario(&preset(name, 5).unwrap()).unwrap();
            let b = generate_scenario(&preset(name, 5).unwrap()).unwrap();
            assert_eq!(a.detections, b.detections);
            assert_eq!(a.chips, b.chips);
            assert_eq!(a.ground_truth, b.ground_truth);
            let c = generate_scenario(&preset(name, 6).unwrap()).unwrap();
            assert_ne!(a.detections, c.detections);
        }
    }

    #[test]
    fn runners_swap_lanes_while_hidden() {
        let s = generate_scenario(&preset("runners", 0).unwrap()).unwrap();
        let (a, b) = (&s.ground_truth[0], &s.ground_truth[1]);
        for g in [a, b] {
            assert!((41..=50).all(|f| !g.boxes.contains_key(&f)));
            assert!(g.boxes.contains_key(&40) && g.boxes.contains_key(&51));
        }
        let y = |g: &TrackRecord, f| g.boxes[&f].center().1;
        assert!(y(a, 40) < y(b, 40));
        assert!(y(a, 51) > y(b, 51));
        assert!(s.appearances[0].distance(&s.appearances[1]) < 0.5);
    }

    #[test]
    fn walkers_have_one_ten_frame_gap() {
        let s = generate_scenario(&preset("walkers", 0).unwrap()).unwrap();
        assert_eq!(s.ground_truth.len(), 3);
        let gaps: Vec<usize> = s.ground_truth.iter().map(|g| 124 - g.boxes.len()).collect();
        assert_eq!(gaps, vec![10, 0, 0]);
    }

    #[test]
    fn clutter_and_platform_are_emitted() {
        let mut spec = line_spec();
        spec.clutter_rate = 2.0;
        spec.platform = Some(PlatformMeta {
            longitude: 10.0,
            latitude: 20.0,
            camera_azimuth: 0.0,
            camera_elevation: 0.0,
            zoom: 1.0,
        });
        let s = generate_scenario(&spec).unwrap();
        assert!(s.detections.records.len() > 30);
        assert!(s.detections.records.iter().all(|r| r.platform().unwrap().is_some()));
        assert!(s.detections.records.iter().any(|r| r.confidence < 1.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = line_spec();
        spec.objects[0].occlusions = vec![[18, 25]];
        assert!(matches!(generate_scenario(&spec), Err(Error::Spec(_))));
        assert!(preset("joggers", 0).is_err());
    }

    #[test]
    fn written_scenario_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scenario(&line_spec()).unwrap();
        s.write(dir.path()).unwrap();
        let loaded = super::super::load_detections(&dir.path().join(DETECTIONS_FILE)).unwrap();
        let mem = s.loaded().unwrap();
        assert!(loaded.warnings.is_empty());
        let a: Vec<_> = loaded.detections().map(|d| (**d).clone()).collect();
        let b: Vec<_> = mem.detections().map(|d| (**d).clone()).collect();
        assert_eq!(a, b);
        let gt = super::super::read_tracks(&dir.path().join(GROUND_TRUTH_FILE)).unwrap();
        assert_eq!(gt, s.ground_truth);
    }
}
