//! Ground-truth to prediction id mapping, expected average overlap in
//! first-id (oUID) and any-id (aUID) modes, and detection-level summaries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{iou, TrackId, TrackRecord};

pub const DEFAULT_IOU_MIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IdMode {
    /// Only the first predicted id associated with a gt track earns credit.
    #[serde(rename = "ouid")]
    OUid,
    /// Every predicted id that never matches another gt track earns credit.
    #[serde(rename = "auid")]
    AUid,
}

impl IdMode {
    pub const ALL: [IdMode; 2] = [IdMode::OUid, IdMode::AUid];

    pub fn as_str(self) -> &'static str {
        match self {
            IdMode::OUid => "ouid",
            IdMode::AUid => "auid",
        }
    }
}

/// A predicted id credited to a gt track over an inclusive frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credit {
    pub pred_id: TrackId,
    pub first_frame: u64,
    pub last_frame: u64,
}

impl Credit {
    fn covers(&self, frame: u64) -> bool {
        (self.first_frame..=self.last_frame).contains(&frame)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdMapping {
    pub mode: IdMode,
    pub iou_min: f64,
    /// Credited predicted ids per gt id, in order of association.
    pub assignment: BTreeMap<TrackId, Vec<Credit>>,
}

impl IdMapping {
    pub fn credits(&self, gt_id: TrackId) -> &[Credit] {
        self.assignment.get(&gt_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn all_frames(gt: &[TrackRecord], pred: &[TrackRecord]) -> BTreeSet<u64> {
    gt.iter().chain(pred).flat_map(|r| r.boxes.keys().copied()).collect()
}

/// One-to-one matches at `frame` with IoU at least `iou_min`, taken in
/// order of decreasing IoU, ties to the lower gt id then the lower
/// predicted id.
fn frame_matches(gt: &[TrackRecord], pred: &[TrackRecord], frame: u64, iou_min: f64) -> Vec<(TrackId, TrackId)> {
    let mut pairs = Vec::new();
    for g in gt {
        let Some(gb) = g.boxes.get(&frame) else { continue };
        for p in pred {
            let Some(pb) = p.boxes.get(&frame) else { continue };
            let o = iou(gb, pb);
            if o >= iou_min {
                pairs.push((o, g.id, p.id));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gs = BTreeSet::new();
    let mut ps = BTreeSet::new();
    pairs
        .into_iter()
        .filter(|&(_, g, p)| gs.insert(g) & ps.insert(p))
        .map(|(_, g, p)| (g, p))
        .collect()
}

/// Maps predicted ids onto gt ids by scanning frames in order.
///
/// A predicted id belongs to the first gt track it overlaps with IoU at
/// least `iou_min`; later matches with other gt tracks are disagreements
/// and earn nothing. In aUID mode a gt track is credited with every id it
/// owns, each from its first match onwards. In oUID mode only the first of
/// those ids is credited, so oUID credit is always a subset of aUID credit.
pub fn map_ids(gt: &[TrackRecord], pred: &[TrackRecord], iou_min: f64, mode: IdMode) -> Result<IdMapping> {
    if !(iou_min > 0.0 && iou_min <= 1.0) {
        return Err(Error::InvalidValue(format!("iou_min {iou_min} outside (0, 1]")));
    }
    let last_of: BTreeMap<TrackId, u64> =
        pred.iter().filter_map(|p| p.boxes.keys().next_back().map(|&f| (p.id, f))).collect();
    let mut owner: BTreeMap<TrackId, TrackId> = BTreeMap::new();
    let mut assignment: BTreeMap<TrackId, Vec<Credit>> = BTreeMap::new();
    for frame in all_frames(gt, pred) {
        for (g, p) in frame_matches(gt, pred, frame, iou_min) {
            if owner.contains_key(&p) {
                continue;
            }
            owner.insert(p, g);
            let list = assignment.entry(g).or_default();
            if mode == IdMode::AUid || list.is_empty() {
                list.push(Credit {
                    pred_id: p,
                    first_frame: frame,
                    last_frame: last_of[&p],
                });
            }
        }
    }
    Ok(IdMapping {
        mode,
        iou_min,
        assignment,
    })
}

/// Per-frame overlap Φ over the frames where `gt` is present: the best IoU
/// among credited predictions covering the frame, 0 when there is none.
pub fn overlap_curve(gt: &TrackRecord, pred: &[TrackRecord], credits: &[Credit]) -> Vec<f64> {
    let by_id: BTreeMap<TrackId, &TrackRecord> = pred.iter().map(|p| (p.id, p)).collect();
    gt.boxes
        .iter()
        .map(|(&frame, gb)| {
            credits
                .iter()
                .filter(|c| c.covers(frame))
                .filter_map(|c| by_id.get(&c.pred_id).and_then(|p| p.boxes.get(&frame)))
                .map(|pb| iou(gb, pb))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Silverman's rule of thumb, `0.9 min(σ, IQR/1.34) n^(-1/5)`, falling
/// back to σ alone when the interquartile range is zero.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Range of sequence lengths to average over.
///
/// A Gaussian KDE of the lengths is evaluated at every integer length
/// between the shortest and longest track. Starting from the mode, the
/// region grows one length at a time towards the denser neighbour (the
/// shorter one on ties) until it holds at least half the mass. With fewer
/// than three distinct lengths the range covers every prefix, `[1, max]`.
pub fn kde_interval(lengths: &[usize]) -> Result<(usize, usize)> {
    let (&min, &max) = match (lengths.iter().min(), lengths.iter().max()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptyGroundTruth),
    };
    let distinct: BTreeSet<usize> = lengths.iter().copied().collect();
    if distinct.len() < 3 {
        return Ok((1, max));
    }
    let xs: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    let h = silverman_bandwidth(&xs);
    let density: Vec<f64> = (min..=max)
        .map(|n| xs.iter().map(|x| (-0.5 * ((n as f64 - x) / h).powi(2)).exp()).sum())
        .collect();
    let total: f64 = density.iter().sum();
    let mode = density
        .iter()
        .enumerate()
        .fold(0, |best, (i, d)| if *d > density[best] { i } else { best });
    let (mut lo, mut hi) = (mode, mode);
    let mut mass = density[mode];
    while mass < 0.5 * total {
        let left = (lo > 0).then(|| density[lo - 1]);
        let right = (hi + 1 < density.len()).then(|| density[hi + 1]);
        match (left, right) {
            (Some(l), Some(r)) if l >= r => {
                lo -= 1;
                mass += l;
            }
            (_, Some(r)) => {
                hi += 1;
                mass += r;
            }
            (Some(l), None) => {
                lo -= 1;
                mass += l;
            }
            (None, None) => break,
        }
    }
    Ok((min + lo, min + hi))
}

/// Mean over `Ns` in `[lo, hi]` of the average of the first `Ns` values of
/// `curve`. Lengths beyond the curve are clamped to its end.
pub fn average_overlap(curve: &[f64], lo: usize, hi: usize) -> f64 {
    if curve.is_empty() || hi < lo {
        return 0.0;
    }
    let mut prefix = Vec::with_capacity(curve.len() + 1);
    prefix.push(0.0);
    for v in curve {
        prefix.push(prefix.last().unwrap() + v);
    }
    let lo = lo.max(1);
    let hi = hi.max(lo);
    let sum: f64 = (lo..=hi)
        .map(|ns| {
            let n = ns.min(curve.len());
            prefix[n] / n as f64
        })
        .sum();
    sum / (hi - lo + 1) as f64
}

/// Expected average overlap, averaged per gt track.
pub fn eao(gt: &[TrackRecord], pred: &[TrackRecord], iou_min: f64, mode: IdMode) -> Result<f64> {
    let mapping = map_ids(gt, pred, iou_min, mode)?;
    eao_with_mapping(gt, pred, &mapping)
}

pub fn eao_with_mapping(gt: &[TrackRecord], pred: &[TrackRecord], mapping: &IdMapping) -> Result<f64> {
    let tracks: Vec<&TrackRecord> = gt.iter().filter(|g| !g.boxes.is_empty()).collect();
    if tracks.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let lengths: Vec<usize> = tracks.iter().map(|g| g.boxes.len()).collect();
    let (lo, hi) = kde_interval(&lengths)?;
    let total: f64 = tracks
        .iter()
        .map(|g| average_overlap(&overlap_curve(g, pred, mapping.credits(g.id)), lo, hi))
        .sum();
    Ok((total / tracks.len() as f64).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub precision: f64,
    pub recall: f64,
    pub absence_accuracy: f64,
}

/// Detection-level precision and recall under credited ids, and how often
/// a gt track's credited predictions stay silent while it is absent.
///
/// A gt box is a true positive when its best credited prediction overlaps
/// it by at least the mapping's `iou_min`. Precision divides by all
/// predicted boxes and is 1.0 when there are none. Absence is judged over
/// every frame seen in either set.
pub fn summary_metrics(gt: &[TrackRecord], pred: &[TrackRecord], mapping: &IdMapping) -> Summary {
    let frames = all_frames(gt, pred);
    let by_id: BTreeMap<TrackId, &TrackRecord> = pred.iter().map(|p| (p.id, p)).collect();
    let mut tp = 0usize;
    let mut gt_boxes = 0usize;
    let mut absent = 0usize;
    let mut silent = 0usize;
    for g in gt {
        let credits = mapping.credits(g.id);
        let curve = overlap_curve(g, pred, credits);
        gt_boxes += curve.len();
        tp += curve.iter().filter(|&&o| o >= mapping.iou_min).count();
        for &f in frames.iter().filter(|f| !g.boxes.contains_key(f)) {
            absent += 1;
            let speaks = credits
                .iter()
                .any(|c| c.covers(f) && by_id.get(&c.pred_id).is_some_and(|p| p.boxes.contains_key(&f)));
            if !speaks {
                silent += 1;
            }
        }
    }
    let pred_boxes: usize = pred.iter().map(|p| p.boxes.len()).sum();
    Summary {
        precision: if pred_boxes == 0 { 1.0 } else { tp as f64 / pred_boxes as f64 },
        recall: if gt_boxes == 0 { 0.0 } else { tp as f64 / gt_boxes as f64 },
        absence_accuracy: if absent == 0 { 1.0 } else { silent as f64 / absent as f64 },
    }
}

/// One row of the metrics table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: IdMode,
    pub eao: f64,
    pub precision: f64,
    pub recall: f64,
    pub absence_accuracy: f64,
}

/// Metrics in both id modes, oUID first.
pub fn evaluate(gt: &[TrackRecord], pred: &[TrackRecord], iou_min: f64) -> Result<Vec<MetricsRow>> {
    IdMode::ALL
        .iter()
        .map(|&mode| {
            let mapping = map_ids(gt, pred, iou_min, mode)?;
            let s = summary_metrics(gt, pred, &mapping);
            Ok(MetricsRow {
                mode,
                eao: eao_with_mapping(gt, pred, &mapping)?,
                precision: s.precision,
                recall: s.recall,
                absence_accuracy: s.absence_accuracy,
            })
        })
        .collect()
}
