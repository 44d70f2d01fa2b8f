use serde::{Deserialize, Serialize};

use super::{AnchorIndex, DetectorConfig};
use crate::datasets::Annotation;
use crate::geometry::GridCell;

/// The ground truth a cell is responsible for, and the anchor that predicts it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Responsible {
    pub gt: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub grid: usize,
    pub num_anchors: usize,
    /// Per cell `i * g + j`.
    pub cells: Vec<Option<Responsible>>,
    /// Objectness target per anchor slot, `1` only at responsible anchors.
    pub objectness: Vec<u8>,
    /// Ground truths dropped because another, larger one owns their cell.
    pub collisions: usize,
}

impl TargetAssignment {
    pub fn responsible_anchors(&self) -> impl Iterator<Item = (AnchorIndex, Responsible)> + '_ {
        let g = self.grid;
        self.cells.iter().enumerate().filter_map(move |(c, r)| {
            r.map(|r| {
                (
                    AnchorIndex {
                        i: c / g,
                        j: c % g,
                        a: r.anchor,
                    },
                    r,
                )
            })
        })
    }

    pub fn target_at(&self, idx: AnchorIndex) -> u8 {
        self.objectness[idx.flat(self.grid, self.num_anchors)]
    }
}

/// Assigns each ground truth to the cell containing its center and, inside
/// that cell, to the anchor of highest shape-only IoU, provided that IoU
/// exceeds `tau`. When two centers share a cell the larger box wins.
pub fn assign_targets(gts: &[Annotation], cfg: &DetectorConfig) -> TargetAssignment {
    let g = cfg.grid;
    let na = cfg.num_anchors();
    let mut owner: Vec<Option<usize>> = vec![None; g * g];
    let mut collisions = 0;
    for (idx, gt) in gts.iter().enumerate() {
        let cell = GridCell::containing(gt.bbox.cx, gt.bbox.cy, g);
        let slot = &mut owner[cell.i * g + cell.j];
        match *slot {
            None => *slot = Some(idx),
            Some(prev) => {
                collisions += 1;
                if gt.bbox.area() > gts[prev].bbox.area() {
                    *slot = Some(idx);
                }
            }
        }
    }
    if collisions > 0 {
        log::debug!("assign_targets: {collisions} cell collisions");
    }

    let mut cells = vec![None; g * g];
    let mut objectness = vec![0u8; g * g * na];
    for (c, gt_idx) in owner.iter().enumerate() {
        let Some(gt_idx) = *gt_idx else { continue };
        let b = &gts[gt_idx].bbox;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (a, anchor) in cfg.anchors.iter().enumerate() {
            let v = anchor.at(b.cx, b.cy).iou(b);
            if v > best.0 {
                best = (v, a);
            }
        }
        if best.0 > cfg.tau {
            cells[c] = Some(Responsible {
                gt: gt_idx,
                anchor: best.1,
            });
            objectness[c * na + best.1] = 1;
        }
    }
    TargetAssignment {
        grid: g,
        num_anchors: na,
        cells,
        objectness,
        collisions,
    }
}
