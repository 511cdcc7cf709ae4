//! Merging pooled detections from several views or models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, score_order, BBox, Detection};

/// How pooled detections are merged. Both strategies are class-aware.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Merge {
    /// Keep the highest-scoring box of each overlapping group.
    Nms { iou: f64 },
    /// Replace each cluster by its score-weighted mean box with the mean
    /// score of the cluster.
    WeightedFusion { iou: f64 },
}

impl Default for Merge {
    fn default() -> Self {
        Merge::Nms { iou: 0.5 }
    }
}

impl Merge {
    pub fn iou(&self) -> f64 {
        match *self {
            Merge::Nms { iou } | Merge::WeightedFusion { iou } => iou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.iou()) {
            Ok(())
        } else {
            Err(Error::invalid(format!("merge iou {} outside [0, 1]", self.iou())))
        }
    }

    /// Fuses `pooled`, whose order is the deterministic pooling order used
    /// for tie-breaking.
    pub fn apply(&self, pooled: &[Detection]) -> Vec<Detection> {
        match *self {
            Merge::Nms { iou } => nms_indices(pooled, iou, true)
                .into_iter()
                .map(|i| pooled[i])
                .collect(),
            Merge::WeightedFusion { iou } => weighted_fusion(pooled, iou),
        }
    }
}

/// Greedy clustering around the highest-scoring unassigned box; each
/// cluster collapses to one box.
pub fn weighted_fusion(pooled: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let order = score_order(pooled, |d| d.score);
    let mut assigned = vec![false; pooled.len()];
    let mut out = Vec::new();
    for (pos, &seed) in order.iter().enumerate() {
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let mut cluster = vec![seed];
        for &j in &order[pos + 1..] {
            if !assigned[j]
                && pooled[j].class_id == pooled[seed].class_id
                && iou(&pooled[seed].bbox, &pooled[j].bbox) >= iou_thresh
            {
                assigned[j] = true;
                cluster.push(j);
            }
        }
        out.push(fuse_cluster(pooled, &cluster));
    }
    out
}

fn fuse_cluster(pooled: &[Detection], cluster: &[usize]) -> Detection {
    let first = pooled[cluster[0]];
    if cluster.len() == 1 {
        return first;
    }
    let n = cluster.len() as f64;
    let weight_sum: f64 = cluster.iter().map(|&i| pooled[i].score).sum();
    // Offsets from the seed box, so a cluster of identical boxes fuses exactly.
    let base = first.bbox.to_array();
    let mut c = base;
    for &i in cluster {
        let w = if weight_sum > 0.0 { pooled[i].score / weight_sum } else { 1.0 / n };
        for ((acc, v), b) in c.iter_mut().zip(pooled[i].bbox.to_array()).zip(base) {
            *acc += w * (v - b);
        }
    }
    Detection {
        bbox: BBox::from_corners(c[0], c[1], c[2], c[3]),
        class_id: first.class_id,
        score: (weight_sum / n).clamp(0.0, 1.0),
    }
}
