use serde::{Deserialize, Serialize};

use super::{AnchorIndex, DetectorOutput};
use crate::datasets::ClassId;
use crate::error::Result;
use crate::geometry::{clip, AnchorSpec, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Clipped to the unit square.
    pub bbox: BBox,
    /// `1..=K`.
    pub class_id: ClassId,
    /// `p_obj * max_k p_cls(k)`.
    pub score: f64,
    pub p_obj: f64,
    pub class_probs: Vec<f64>,
    pub source: AnchorIndex,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Turns every anchor with `p_obj >= obj_threshold` into a detection, then
/// applies same-class non-maximum suppression when `nms_iou` is given.
/// Output is sorted by descending score. Anchors whose box collapses after
/// clipping are dropped.
pub fn decode(
    out: &DetectorOutput,
    anchors: &[AnchorSpec],
    obj_threshold: f64,
    nms_iou: Option<f64>,
) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (flat, p) in out.preds.iter().enumerate() {
        if p.p_obj < obj_threshold {
            continue;
        }
        let idx = AnchorIndex::from_flat(flat, out.grid, out.num_anchors);
        let raw = out.decoded_box(idx, anchors)?;
        let Ok(bbox) = clip(&raw) else { continue };
        let k = argmax(&p.p_cls);
        dets.push(Detection {
            bbox,
            class_id: k as ClassId + 1,
            score: p.p_obj * p.p_cls[k],
            p_obj: p.p_obj,
            class_probs: p.p_cls.clone(),
            source: idx,
        });
    }
    sort_by_score(&mut dets);
    Ok(match nms_iou {
        Some(t) => nms(dets, t),
        None => dets,
    })
}

fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.source.cmp(&b.source)));
}

/// Greedy same-class suppression: a detection is dropped when its IoU with a
/// kept, higher-scoring detection of the same class exceeds `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    sort_by_score(&mut dets);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
