//! Hypothesis trees: one per putative object, every root-to-leaf path a
//! candidate track.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ekf::KinematicState;
use crate::model::{ComparatorScore, Detection, DetectionId, TrackId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Dead,
}

#[derive(Clone, Debug)]
pub struct TrackNode {
    pub parent: Option<usize>,
    /// `None` on a missed-detection branch.
    pub detection: Option<Arc<Detection>>,
    pub frame_index: u64,
    pub increment: f64,
    pub branch_log_score: f64,
    /// Posterior after this node's measurement, or the prediction on a miss.
    pub kinematic_state: KinematicState,
    /// Detections along the root path.
    pub hits: usize,
    /// Frames since the last detection on the path.
    pub misses: u64,
    pub fused: Option<f64>,
    pub scores: Vec<ComparatorScore>,
}

#[derive(Clone, Debug)]
pub struct TrackTree {
    pub tree_id: TrackId,
    pub nodes: Vec<TrackNode>,
    pub leaves: Vec<usize>,
    pub birth_frame: u64,
    pub status: TrackStatus,
    /// Consecutive frames in which the selected leaf took a detection.
    pub hit_streak: usize,
    /// Set once and kept after the tree dies.
    pub confirmed: bool,
    /// Detections of the path last selected, oldest first.
    pub selected_path: Vec<Arc<Detection>>,
}

impl TrackTree {
    pub fn new(tree_id: TrackId, root: TrackNode) -> Self {
        Self {
            tree_id,
            birth_frame: root.frame_index,
            nodes: vec![root],
            leaves: vec![0],
            status: TrackStatus::Tentative,
            hit_streak: 0,
            confirmed: false,
            selected_path: Vec::new(),
        }
    }

    pub fn root(&self) -> &TrackNode {
        &self.nodes[0]
    }

    pub fn node(&self, i: usize) -> &TrackNode {
        &self.nodes[i]
    }

    /// Appends `node` as a child of its parent and returns its index.
    pub fn push(&mut self, node: TrackNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Node indices from the root to `leaf`.
    pub fn lineage(&self, leaf: usize) -> Vec<usize> {
        let mut out = vec![leaf];
        let mut cur = leaf;
        while let Some(p) = self.nodes[cur].parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Detections on the root path of `leaf`, oldest first.
    pub fn path_detections(&self, leaf: usize) -> Vec<Arc<Detection>> {
        self.lineage(leaf).into_iter().filter_map(|i| self.nodes[i].detection.clone()).collect()
    }

    pub fn path_detection_ids(&self, leaf: usize) -> Vec<DetectionId> {
        self.lineage(leaf)
            .into_iter()
            .filter_map(|i| self.nodes[i].detection.as_ref().map(|d| d.detection_id))
            .collect()
    }

    /// Sum of increments along the root path.
    pub fn recomputed_score(&self, leaf: usize) -> f64 {
        self.lineage(leaf).into_iter().map(|i| self.nodes[i].increment).sum()
    }

    pub fn is_descendant(&self, node: usize, ancestor: usize) -> bool {
        let mut cur = Some(node);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.nodes[c].parent;
        }
        false
    }

    /// Deepest node on the root path of `leaf` whose frame is at most
    /// `frame`.
    pub fn ancestor_at_or_before(&self, leaf: usize, frame: u64) -> Option<usize> {
        self.lineage(leaf).into_iter().rev().find(|&i| self.nodes[i].frame_index <= frame)
    }

    /// Keeps only `keep` as leaves and drops every node that no longer lies
    /// on a surviving path. Indices are renumbered; returns the new index
    /// of each kept leaf in the given order.
    pub fn retain_leaves(&mut self, keep: &[usize]) -> Vec<usize> {
        let mut alive = vec![false; self.nodes.len()];
        for &l in keep {
            for i in self.lineage(l) {
                alive[i] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::with_capacity(alive.iter().filter(|a| **a).count());
        for (i, node) in self.nodes.iter().enumerate() {
            if alive[i] {
                remap[i] = nodes.len();
                let mut n = node.clone();
                n.parent = n.parent.map(|p| remap[p]);
                nodes.push(n);
            }
        }
        self.nodes = nodes;
        self.leaves = keep.iter().map(|&l| remap[l]).collect();
        self.leaves.clone()
    }

    /// Whether any leaf path uses a detection in `ids`.
    pub fn leaves_using(&self, ids: &HashSet<DetectionId>) -> Vec<usize> {
        self.leaves
            .iter()
            .copied()
            .filter(|&l| self.path_detection_ids(l).iter().any(|d| ids.contains(d)))
            .collect()
    }
}
