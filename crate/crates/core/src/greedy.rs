//! Frame-by-frame greedy nearest-neighbour association on the pixel EKF
//! likelihood alone.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ekf::{kf_gate, kf_init, kf_innovation, kf_likelihood, kf_predict_to, kf_update, KinematicState, NoiseConfig, DEFAULT_GATE};
use crate::error::{Error, Result};
use crate::model::{Assignment, Associator, ComparatorScore, Detection, DetectionId, TrackId, TrackRecord, Tracklet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreedyConfig {
    pub gate_threshold: f64,
    pub max_misses: u64,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            gate_threshold: DEFAULT_GATE,
            max_misses: 12,
        }
    }
}

/// A gated (track, detection) pair and its likelihood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub track_id: TrackId,
    pub detection_id: DetectionId,
    pub likelihood: f64,
}

/// Picks pairs in order of decreasing likelihood, ties to the lower
/// track id and then the lower detection id, skipping any pair whose
/// track or detection is already taken. Returns the picks in order.
pub fn greedy_match(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut order = candidates.to_vec();
    order.sort_by(|a, b| {
        b.likelihood
            .total_cmp(&a.likelihood)
            .then(a.track_id.cmp(&b.track_id))
            .then(a.detection_id.cmp(&b.detection_id))
    });
    let mut tracks = HashSet::new();
    let mut dets = HashSet::new();
    let mut out = Vec::new();
    for c in order {
        if !tracks.contains(&c.track_id) && !dets.contains(&c.detection_id) {
            tracks.insert(c.track_id);
            dets.insert(c.detection_id);
            out.push(c);
        }
    }
    out
}

struct Active {
    tracklet: Tracklet,
    state: KinematicState,
}

pub struct GreedyTracker {
    cfg: GreedyConfig,
    noise: NoiseConfig,
    active: BTreeMap<TrackId, Active>,
    finished: Vec<TrackRecord>,
    next_id: TrackId,
    last_frame: Option<u64>,
}

impl GreedyTracker {
    pub fn new(cfg: GreedyConfig, noise: NoiseConfig) -> Result<Self> {
        if !(cfg.gate_threshold > 0.0) {
            return Err(Error::Config("gate_threshold must be positive".into()));
        }
        noise.validate()?;
        Ok(Self {
            cfg,
            noise,
            active: BTreeMap::new(),
            finished: Vec::new(),
            next_id: 0,
            last_frame: None,
        })
    }

    pub fn active_ids(&self) -> Vec<TrackId> {
        self.active.keys().copied().collect()
    }

    fn retire(&mut self, id: TrackId) {
        if let Some(a) = self.active.remove(&id) {
            self.finished.push(TrackRecord::from_detections(id, a.tracklet.observations()));
        }
    }
}

impl Associator for GreedyTracker {
    fn process_frame(&mut self, frame: u64, detections: &[Arc<Detection>]) -> Result<Vec<Assignment>> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::FrameOrderViolation { last, got: frame });
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame_index != frame) {
            return Err(Error::FrameOrderViolation {
                last: frame,
                got: d.frame_index,
            });
        }
        self.last_frame = Some(frame);

        let mut priors = BTreeMap::new();
        let mut candidates = Vec::new();
        for (&id, a) in &self.active {
            let prior = kf_predict_to(&a.state, frame, &self.noise);
            for d in detections {
                let (nu, s) = kf_innovation(&prior, &d.bbox, &self.noise);
                if kf_gate(&nu, &s, self.cfg.gate_threshold) {
                    candidates.push(Candidate {
                        track_id: id,
                        detection_id: d.detection_id,
                        likelihood: kf_likelihood(&nu, &s)?,
                    });
                }
            }
            priors.insert(id, prior);
        }

        let picks = greedy_match(&candidates);
        let by_id: BTreeMap<DetectionId, &Arc<Detection>> = detections.iter().map(|d| (d.detection_id, d)).collect();
        let mut out = Vec::new();
        let mut used = HashSet::new();
        let mut taken = HashSet::new();
        for p in &picks {
            let det = by_id[&p.detection_id];
            let a = self.active.get_mut(&p.track_id).expect("candidate tracks are active");
            a.state = kf_update(&priors[&p.track_id], &det.bbox, &self.noise)?.state;
            a.tracklet.push(det.clone())?;
            used.insert(p.detection_id);
            taken.insert(p.track_id);
            out.push(Assignment {
                frame_index: frame,
                track_id: p.track_id,
                detection_id: Some(p.detection_id),
                fused: None,
                scores: vec![ComparatorScore {
                    comparator: crate::comparators::EKF.into(),
                    raw: p.likelihood,
                    normalized: p.likelihood,
                }],
            });
        }

        let mut dead = Vec::new();
        for (&id, a) in self.active.iter_mut() {
            if taken.contains(&id) {
                continue;
            }
            a.state = priors[&id].clone();
            a.tracklet.misses += 1;
            if u64::from(a.tracklet.misses) > self.cfg.max_misses {
                dead.push(id);
            } else {
                out.push(Assignment {
                    frame_index: frame,
                    track_id: id,
                    detection_id: None,
                    fused: None,
                    scores: Vec::new(),
                });
            }
        }
        for id in dead {
            self.retire(id);
        }

        for d in detections.iter().filter(|d| !used.contains(&d.detection_id)) {
            let id = self.next_id;
            self.next_id += 1;
            self.active.insert(
                id,
                Active {
                    tracklet: Tracklet::new(id, d.clone()),
                    state: kf_init(d, &self.noise),
                },
            );
            out.push(Assignment {
                frame_index: frame,
                track_id: id,
                detection_id: Some(d.detection_id),
                fused: None,
                scores: Vec::new(),
            });
        }
        out.sort_by_key(|a| a.track_id);
        Ok(out)
    }

    fn finish(&mut self) -> Vec<TrackRecord> {
        for id in self.active_ids() {
            self.retire(id);
        }
        let mut out = std::mem::take(&mut self.finished);
        out.sort_by_key(|r| r.id);
        out
    }
}
