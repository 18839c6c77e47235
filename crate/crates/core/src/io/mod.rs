//! Files in and out, run configuration, synthetic scenarios, and the
//! track and eval pipelines that tie the modules together.

pub mod config;
pub mod detections;
pub mod output;
pub mod scenario;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub use config::{build_associator, build_comparators, AssociatorKind, ModelPaths, Models, RunConfig};
pub use detections::{
    load_detections, read_chip_png, read_detection_file, write_chip_png, write_detection_file, DetectionFile,
    DetectionHeader, DetectionRecord, Frame, LoadedDetections,
};
pub use output::{
    read_assignments, read_metrics, read_tracks, write_assignments, write_attention_png, write_metrics, write_tracks,
};
pub use scenario::{generate_scenario, preset, Scenario, ScenarioSpec};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsRow};
use crate::model::{Assignment, Associator, Detection, TrackRecord};

pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingOutput {
    pub assignments: Vec<Assignment>,
    pub tracks: Vec<TrackRecord>,
}

impl TrackingOutput {
    /// Writes `tracks.jsonl` and `assignments.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_tracks(&dir.join(TRACKS_FILE), &self.tracks)?;
        write_assignments(&dir.join(ASSIGNMENTS_FILE), &self.assignments)
    }
}

/// Streams every frame of `input`, including frames without detections,
/// through `associator`.
pub fn track_with(associator: &mut dyn Associator, input: &LoadedDetections) -> Result<TrackingOutput> {
    let by_frame: BTreeMap<u64, &Vec<Arc<Detection>>> =
        input.frames.iter().map(|f| (f.frame_index, &f.detections)).collect();
    let empty = Vec::new();
    let mut assignments = Vec::new();
    for frame in input.frame_range() {
        let dets = by_frame.get(&frame).copied().unwrap_or(&empty);
        let out = associator.process_frame(frame, dets).map_err(|e| Error::AtFrame {
            frame,
            source: Box::new(e),
        })?;
        log::debug!("frame {frame}: {} detections, {} assignments", dets.len(), out.len());
        assignments.extend(out);
    }
    Ok(TrackingOutput {
        assignments,
        tracks: associator.finish(),
    })
}

pub fn run_tracking(cfg: &RunConfig, models: &Models, input: &LoadedDetections) -> Result<TrackingOutput> {
    let mut associator = build_associator(cfg, models, input.header.frame_dims())?;
    track_with(associator.as_mut(), input)
}

/// Metrics in both id modes. Empty predictions are allowed and score 0.
pub fn run_eval(gt: &[TrackRecord], pred: &[TrackRecord], iou_min: f64) -> Result<Vec<MetricsRow>> {
    evaluate(gt, pred, iou_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::IdMode;

    fn walkers() -> Scenario {
        generate_scenario(&preset("walkers", 3).unwrap()).unwrap()
    }

    #[test]
    fn greedy_and_mht_outputs_share_a_schema() {
        let s = walkers();
        let input = s.loaded().unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, kind) in [AssociatorKind::Greedy, AssociatorKind::Mht].into_iter().enumerate() {
            let cfg = RunConfig {
                associator: kind,
                ..RunConfig::default()
            };
            let out = run_tracking(&cfg, &Models::default(), &input).unwrap();
            assert!(!out.tracks.is_empty());
            let d = dir.path().join(i.to_string());
            out.write(&d).unwrap();
            assert_eq!(read_tracks(&d.join(TRACKS_FILE)).unwrap(), out.tracks);
            assert_eq!(read_assignments(&d.join(ASSIGNMENTS_FILE)).unwrap(), out.assignments);
        }
    }

    #[test]
    fn tracking_is_repeatable() {
        let input = walkers().loaded().unwrap();
        let cfg = RunConfig {
            comparators: vec!["ekf".into(), "ssd".into()],
            ..RunConfig::default()
        };
        let a = run_tracking(&cfg, &Models::default(), &input).unwrap();
        let b = run_tracking(&cfg, &Models::default(), &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_of_ground_truth_is_perfect_and_of_nothing_is_zero() {
        let s = walkers();
        let rows = run_eval(&s.ground_truth, &s.ground_truth, 0.5).unwrap();
        assert_eq!(rows.iter().map(|r| r.mode).collect::<Vec<_>>(), vec![IdMode::OUid, IdMode::AUid]);
        assert!(rows.iter().all(|r| r.eao == 1.0 && r.precision == 1.0 && r.recall == 1.0));
        let rows = run_eval(&s.ground_truth, &[], 0.5).unwrap();
        assert!(rows.iter().all(|r| r.eao == 0.0 && r.recall == 0.0 && r.precision == 1.0));
    }

    #[test]
    fn frame_errors_carry_the_frame() {
        struct Failing;
        impl Associator for Failing {
            fn process_frame(&mut self, frame: u64, _: &[Arc<Detection>]) -> Result<Vec<Assignment>> {
                if frame == 2 {
                    Err(Error::SingularInnovation)
                } else {
                    Ok(Vec::new())
                }
            }
            fn finish(&mut self) -> Vec<TrackRecord> {
                Vec::new()
            }
        }
        let input = walkers().loaded().unwrap();
        match track_with(&mut Failing, &input) {
            Err(Error::AtFrame { frame: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
