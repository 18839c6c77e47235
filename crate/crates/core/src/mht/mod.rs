//! Track-oriented multiple hypothesis tracking.
//!
//! Each frame every leaf of every tree branches on the detections inside
//! its gate plus a missed-detection child, and every detection also starts
//! a new tree. The best set of mutually compatible leaves is found as a
//! maximum-weight independent set, then trees are pruned N frames back
//! from the chosen leaves.

pub mod mwis;
pub mod tree;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use mwis::{mwis_bruteforce, mwis_greedy, solve_mwis, ConflictGraph, MwisSolution, BRUTEFORCE_LIMIT};
pub use tree::{TrackNode, TrackStatus, TrackTree};

use crate::comparators::{Branch, ComparatorSet};
use crate::ekf::{kf_gate, kf_init, kf_innovation, kf_predict_to, kf_update, NoiseConfig, DEFAULT_GATE};
use crate::error::{Error, Result};
use crate::model::{Assignment, Associator, Detection, DetectionId, TrackId, TrackRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhtConfig {
    /// Squared Mahalanobis gate.
    pub gate_threshold: f64,
    pub nscan: u64,
    /// Longest tolerated run of missed frames on a branch.
    pub max_misses: u64,
    pub confirm_hits: usize,
    pub max_leaves_per_tree: usize,
    pub new_track_log_penalty: f64,
    /// Charged once per missed frame.
    pub miss_log_penalty: f64,
    /// Largest connected component solved exactly.
    pub exact_solver_cap: usize,
}

impl Default for MhtConfig {
    fn default() -> Self {
        Self {
            gate_threshold: DEFAULT_GATE,
            nscan: 3,
            max_misses: 12,
            confirm_hits: 2,
            max_leaves_per_tree: 32,
            new_track_log_penalty: 0.1f64.ln(),
            miss_log_penalty: 0.3f64.ln(),
            exact_solver_cap: 500,
        }
    }
}

impl MhtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gate_threshold > 0.0) {
            return Err(Error::Config("gate_threshold must be positive".into()));
        }
        if self.nscan == 0 || self.max_misses == 0 || self.confirm_hits == 0 || self.max_leaves_per_tree == 0 {
            return Err(Error::Config("nscan, max_misses, confirm_hits and max_leaves_per_tree must be positive".into()));
        }
        if !(self.new_track_log_penalty <= 0.0) || !(self.miss_log_penalty <= 0.0) {
            return Err(Error::Config("log penalties must be <= 0".into()));
        }
        if self.exact_solver_cap == 0 {
            return Err(Error::Config("exact_solver_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Log-likelihood ratio of a branch against explaining each of its
/// detections as the start of a new track. Only positive branches are
/// worth selecting.
pub fn branch_llr(node: &TrackNode, cfg: &MhtConfig) -> f64 {
    node.branch_log_score - cfg.new_track_log_penalty * node.hits as f64
}

/// The best global hypothesis: at most one leaf per tree.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalHypothesis {
    /// `(tree index, leaf node index)` pairs in tree order.
    pub selected: Vec<(usize, usize)>,
    pub total_log_score: f64,
    /// False when the greedy fallback produced the selection.
    pub exact: bool,
}

/// Vertices of a conflict graph with the leaf each one stands for.
pub struct LeafGraph {
    pub graph: ConflictGraph,
    /// `(tree index, leaf node index)` per vertex.
    pub leaves: Vec<(usize, usize)>,
}

/// Grows every tree by one frame of detections and spawns a new tree per
/// detection. Returns the ids of the spawned trees.
pub fn expand_trees(
    trees: &mut Vec<TrackTree>,
    frame: u64,
    detections: &[Arc<Detection>],
    comparators: &ComparatorSet,
    noise: &NoiseConfig,
    cfg: &MhtConfig,
    next_id: &mut TrackId,
) -> Result<Vec<TrackId>> {
    for d in detections {
        if d.frame_index != frame {
            return Err(Error::FrameOrderViolation {
                last: frame,
                got: d.frame_index,
            });
        }
    }
    for t in trees.iter() {
        for &l in &t.leaves {
            let f = t.nodes[l].frame_index;
            if f >= frame {
                return Err(Error::FrameOrderViolation { last: f, got: frame });
            }
        }
    }

    for tree in trees.iter_mut() {
        let mut new_leaves = Vec::new();
        for leaf in tree.leaves.clone() {
            let node = tree.nodes[leaf].clone();
            let prior = kf_predict_to(&node.kinematic_state, frame, noise);
            let gated: Vec<&Arc<Detection>> = detections
                .iter()
                .filter(|d| {
                    let (nu, s) = kf_innovation(&prior, &d.bbox, noise);
                    kf_gate(&nu, &s, cfg.gate_threshold)
                })
                .collect();
            if !gated.is_empty() {
                let history = tree.path_detections(leaf);
                let branch = Branch {
                    observations: &history,
                    prior: &prior,
                    frame,
                };
                let prepared = comparators.prepare(&branch)?;
                for det in gated {
                    let pair = comparators.score(&branch, &prepared, det)?;
                    let update = kf_update(&prior, &det.bbox, noise)?;
                    let child = TrackNode {
                        parent: Some(leaf),
                        detection: Some(det.clone()),
                        frame_index: frame,
                        increment: pair.log_score,
                        branch_log_score: node.branch_log_score + pair.log_score,
                        kinematic_state: update.state,
                        hits: node.hits + 1,
                        misses: 0,
                        fused: Some(pair.fused),
                        scores: pair.parts,
                    };
                    new_leaves.push(tree.push(child));
                }
            }
            let gap = frame - node.frame_index;
            let misses = node.misses + gap;
            if misses <= cfg.max_misses {
                let inc = cfg.miss_log_penalty * gap as f64;
                let child = TrackNode {
                    parent: Some(leaf),
                    detection: None,
                    frame_index: frame,
                    increment: inc,
                    branch_log_score: node.branch_log_score + inc,
                    kinematic_state: prior,
                    hits: node.hits,
                    misses,
                    fused: None,
                    scores: Vec::new(),
                };
                new_leaves.push(tree.push(child));
            }
        }
        if new_leaves.is_empty() {
            tree.status = TrackStatus::Dead;
        }
        tree.retain_leaves(&new_leaves);
    }

    let mut spawned = Vec::with_capacity(detections.len());
    for det in detections {
        let root = TrackNode {
            parent: None,
            detection: Some(det.clone()),
            frame_index: frame,
            increment: cfg.new_track_log_penalty,
            branch_log_score: cfg.new_track_log_penalty,
            kinematic_state: kf_init(det, noise),
            hits: 1,
            misses: 0,
            fused: None,
            scores: Vec::new(),
        };
        trees.push(TrackTree::new(*next_id, root));
        spawned.push(*next_id);
        *next_id += 1;
    }
    Ok(spawned)
}

/// Conflict graph over the leaves with positive [`branch_llr`]. Leaves of
/// one tree always conflict; leaves of different trees conflict when their
/// paths share a detection.
pub fn build_conflict_graph(trees: &[TrackTree], cfg: &MhtConfig) -> Result<LeafGraph> {
    let mut leaves = Vec::new();
    let mut weights = Vec::new();
    for (ti, t) in trees.iter().enumerate() {
        if t.status == TrackStatus::Dead {
            continue;
        }
        for &l in &t.leaves {
            let w = branch_llr(&t.nodes[l], cfg);
            if w > 0.0 {
                leaves.push((ti, l));
                weights.push(w);
            }
        }
    }
    let mut graph = ConflictGraph::new(weights)?;
    let mut users: HashMap<DetectionId, Vec<usize>> = HashMap::new();
    for (v, &(ti, l)) in leaves.iter().enumerate() {
        for id in trees[ti].path_detection_ids(l) {
            users.entry(id).or_default().push(v);
        }
    }
    for (a, &(ta, _)) in leaves.iter().enumerate() {
        for (b, &(tb, _)) in leaves.iter().enumerate().skip(a + 1) {
            if ta == tb {
                graph.add_edge(a, b);
            }
        }
    }
    for vs in users.values() {
        for (i, &a) in vs.iter().enumerate() {
            for &b in &vs[i + 1..] {
                graph.add_edge(a, b);
            }
        }
    }
    Ok(LeafGraph { graph, leaves })
}

/// Best global hypothesis; falls back to greedy selection when a
/// component exceeds the exact solver's cap.
pub fn select_hypothesis(trees: &[TrackTree], cfg: &MhtConfig) -> Result<GlobalHypothesis> {
    let lg = build_conflict_graph(trees, cfg)?;
    let (sol, exact) = match solve_mwis(&lg.graph, cfg.exact_solver_cap) {
        Ok(s) => (s, true),
        Err(Error::SizeLimit { vertices, cap }) => {
            log::warn!("conflict component of {vertices} leaves exceeds cap {cap}; using greedy selection");
            (mwis_greedy(&lg.graph), false)
        }
        Err(e) => return Err(e),
    };
    let mut selected: Vec<(usize, usize)> = sol.vertices.iter().map(|&v| lg.leaves[v]).collect();
    selected.sort_unstable();
    let total_log_score = selected.iter().map(|&(t, l)| trees[t].nodes[l].branch_log_score).sum();
    Ok(GlobalHypothesis {
        selected,
        total_log_score,
        exact,
    })
}

/// N-scan pruning.
///
/// Each tree with a selected leaf is cut back to the descendants of that
/// leaf's ancestor `nscan` frames earlier, and the detections on the path
/// up to that ancestor become committed. Leaves of other trees that use a
/// committed detection are removed. Finally each tree keeps at most
/// `max_leaves_per_tree` leaves ranked by [`branch_llr`], always including
/// its selected leaf. Trees left without leaves are marked dead.
pub fn nscan_prune(trees: &mut [TrackTree], best: &GlobalHypothesis, frame: u64, cfg: &MhtConfig) {
    let horizon = frame.saturating_sub(cfg.nscan);
    let mut committed: HashMap<DetectionId, usize> = HashMap::new();
    let mut selected_leaf: HashMap<usize, usize> = HashMap::new();

    for &(ti, leaf) in &best.selected {
        let tree = &mut trees[ti];
        // Trees younger than the scan window are left alone.
        let Some(anchor) = (frame >= cfg.nscan).then(|| tree.ancestor_at_or_before(leaf, horizon)).flatten() else {
            selected_leaf.insert(ti, leaf);
            continue;
        };
        for i in tree.lineage(anchor) {
            if let Some(d) = &tree.nodes[i].detection {
                committed.insert(d.detection_id, ti);
            }
        }
        let keep: Vec<usize> = tree.leaves.iter().copied().filter(|&l| tree.is_descendant(l, anchor)).collect();
        let pos = keep.iter().position(|&l| l == leaf).expect("selected leaf descends from its ancestor");
        let remapped = tree.retain_leaves(&keep);
        selected_leaf.insert(ti, remapped[pos]);
    }

    for (ti, tree) in trees.iter_mut().enumerate() {
        if tree.status == TrackStatus::Dead {
            continue;
        }
        let foreign: HashSet<DetectionId> =
            committed.iter().filter(|(_, owner)| **owner != ti).map(|(id, _)| *id).collect();
        let mut keep: Vec<usize> = if foreign.is_empty() {
            tree.leaves.clone()
        } else {
            let bad: HashSet<usize> = tree.leaves_using(&foreign).into_iter().collect();
            tree.leaves.iter().copied().filter(|l| !bad.contains(l)).collect()
        };
        let chosen = selected_leaf.get(&ti).copied();
        if keep.len() > cfg.max_leaves_per_tree {
            keep.sort_by(|&a, &b| {
                let pa = Some(a) == chosen;
                let pb = Some(b) == chosen;
                pb.cmp(&pa)
                    .then(branch_llr(&tree.nodes[b], cfg).total_cmp(&branch_llr(&tree.nodes[a], cfg)))
                    .then(a.cmp(&b))
            });
            keep.truncate(cfg.max_leaves_per_tree);
            keep.sort_unstable();
        }
        if keep.is_empty() {
            tree.status = TrackStatus::Dead;
            tree.leaves.clear();
        } else if keep.len() != tree.leaves.len() {
            tree.retain_leaves(&keep);
        }
    }
}

/// Multiple hypothesis tracker over a fixed comparator set.
pub struct MhtTracker {
    cfg: MhtConfig,
    noise: NoiseConfig,
    comparators: ComparatorSet,
    trees: Vec<TrackTree>,
    next_id: TrackId,
    last_frame: Option<u64>,
    finished: Vec<TrackRecord>,
    fallback_frames: Vec<u64>,
}

impl MhtTracker {
    pub fn new(cfg: MhtConfig, noise: NoiseConfig, comparators: ComparatorSet) -> Result<Self> {
        cfg.validate()?;
        noise.validate()?;
        Ok(Self {
            cfg,
            noise,
            comparators,
            trees: Vec::new(),
            next_id: 0,
            last_frame: None,
            finished: Vec::new(),
            fallback_frames: Vec::new(),
        })
    }

    pub fn config(&self) -> &MhtConfig {
        &self.cfg
    }

    pub fn trees(&self) -> &[TrackTree] {
        &self.trees
    }

    /// Frames whose hypothesis came from the greedy fallback.
    pub fn fallback_frames(&self) -> &[u64] {
        &self.fallback_frames
    }

    fn retire_dead(&mut self) {
        let (dead, alive): (Vec<TrackTree>, Vec<TrackTree>) =
            self.trees.drain(..).partition(|t| t.status == TrackStatus::Dead);
        self.trees = alive;
        for t in dead {
            if !t.selected_path.is_empty() && t.confirmed {
                self.finished.push(TrackRecord::from_detections(t.tree_id, &t.selected_path));
            }
        }
    }
}

impl Associator for MhtTracker {
    fn process_frame(&mut self, frame: u64, detections: &[Arc<Detection>]) -> Result<Vec<Assignment>> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::FrameOrderViolation { last, got: frame });
            }
        }
        self.last_frame = Some(frame);

        expand_trees(
            &mut self.trees,
            frame,
            detections,
            &self.comparators,
            &self.noise,
            &self.cfg,
            &mut self.next_id,
        )?;
        self.retire_dead();

        let best = select_hypothesis(&self.trees, &self.cfg)?;
        if !best.exact {
            self.fallback_frames.push(frame);
        }
        let chosen: HashMap<usize, usize> = best.selected.iter().copied().collect();

        let mut out = Vec::new();
        for (ti, tree) in self.trees.iter_mut().enumerate() {
            let leaf = chosen.get(&ti).copied();
            let took = leaf.and_then(|l| tree.nodes[l].detection.as_ref().map(|d| d.frame_index == frame));
            if took == Some(true) {
                tree.hit_streak += 1;
            } else if tree.status == TrackStatus::Tentative {
                tree.hit_streak = 0;
            }
            if tree.status == TrackStatus::Tentative && tree.hit_streak >= self.cfg.confirm_hits {
                tree.status = TrackStatus::Confirmed;
                tree.confirmed = true;
            }
            if let Some(l) = leaf {
                tree.selected_path = tree.path_detections(l);
            }
            if tree.status != TrackStatus::Confirmed {
                continue;
            }
            let node = leaf.map(|l| &tree.nodes[l]).filter(|n| n.frame_index == frame && n.detection.is_some());
            out.push(Assignment {
                frame_index: frame,
                track_id: tree.tree_id,
                detection_id: node.and_then(|n| n.detection.as_ref().map(|d| d.detection_id)),
                fused: node.and_then(|n| n.fused),
                scores: node.map(|n| n.scores.clone()).unwrap_or_default(),
            });
        }
        out.sort_by_key(|a| a.track_id);

        nscan_prune(&mut self.trees, &best, frame, &self.cfg);
        self.retire_dead();
        Ok(out)
    }

    fn finish(&mut self) -> Vec<TrackRecord> {
        for t in &mut self.trees {
            t.status = TrackStatus::Dead;
        }
        self.retire_dead();
        let mut out = std::mem::take(&mut self.finished);
        out.sort_by_key(|r| r.id);
        out
    }
}
