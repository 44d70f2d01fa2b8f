//! On-the-fly pseudo-labels: detections that do not overlap any ground truth
//! are cropped, classified by the proxy with a patch-drop ensemble, and kept
//! as soft targets when the proxy is confident they show an object of interest.

use serde::{Deserialize, Serialize};

use crate::datasets::Annotation;
use crate::detector::{decode, AnchorIndex, Detection, DetectorOutput};
use crate::error::{Error, Result};
use crate::geometry::{max_iou, AnchorSpec, BBox};
use crate::patch::{pixel_rect, Patch};
use crate::proxy::{ensemble_predict, pad_to_nearest, Proxy, ProxyPrediction};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelParams {
    /// Candidates whose max IoU with a ground truth exceeds this are skipped.
    pub theta1: f64,
    /// Proxy confidence gate.
    pub theta2: f64,
    /// Weight of the detector's own class estimate in the soft class target.
    pub beta: f64,
    /// Patch-drop copies per candidate.
    pub m: usize,
    /// Patch-drop grid side.
    pub s: usize,
    /// Minimum detector objectness for a candidate.
    pub obj_prefilter: f64,
    /// Class-agnostic suppression among candidates; `None` disables it.
    pub dedup_iou: Option<f64>,
    /// No pseudo-labels before this epoch.
    pub warmup_epochs: usize,
}

impl Default for PseudoLabelParams {
    fn default() -> Self {
        Self {
            theta1: 0.5,
            theta2: 0.8,
            beta: 0.0,
            m: 2,
            s: 3,
            obj_prefilter: 0.25,
            dedup_iou: Some(0.45),
            warmup_epochs: 2,
        }
    }
}

impl PseudoLabelParams {
    /// Every candidate box is considered: no objectness prefilter and no suppression.
    pub fn strict(self) -> Self {
        Self {
            obj_prefilter: 0.0,
            dedup_iou: None,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let bad = |m: &str| Err(Error::Config(format!("pseudo-labels: {m}")));
        if !unit(self.theta1) {
            return bad("theta1 must lie in [0, 1]");
        }
        if !(self.theta2 > 0.0 && self.theta2 <= 1.0) {
            return bad("theta2 must lie in (0, 1]");
        }
        if !unit(self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !unit(self.obj_prefilter) {
            return bad("obj_prefilter must lie in [0, 1]");
        }
        if self.dedup_iou.is_some_and(|d| !unit(d)) {
            return bad("dedup_iou must lie in [0, 1]");
        }
        if self.s == 0 {
            return bad("patch-drop grid side must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    /// Soft class target over the `K` classes of interest.
    pub class_probs: Vec<f64>,
    /// Soft objectness target.
    pub obj_prob: f64,
    pub source: AnchorIndex,
    pub epoch: usize,
    /// The ensemble prediction that passed the gate.
    pub hbar: Vec<f64>,
}

/// Pseudo-labels of one image at one epoch, ordered by source anchor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoStats {
    /// Candidates sent to the proxy.
    pub candidates: usize,
    pub emitted: usize,
    /// Rejected by the proxy gate.
    pub gated_out: usize,
    /// Removed by the overlap, objectness or suppression filters.
    pub filtered: usize,
    /// Crops that rounded to an empty pixel rectangle.
    pub degenerate: usize,
}

impl std::ops::AddAssign for PseudoStats {
    fn add_assign(&mut self, o: Self) {
        self.candidates += o.candidates;
        self.emitted += o.emitted;
        self.gated_out += o.gated_out;
        self.filtered += o.filtered;
        self.degenerate += o.degenerate;
    }
}

/// Keeps detections with `max_iou <= theta1` against the ground truths and
/// `p_obj >= obj_prefilter`, then applies class-agnostic suppression by
/// objectness. The result is ordered by source anchor.
pub fn candidate_rois(dets: &[Detection], gts: &[Annotation], params: &PseudoLabelParams) -> Result<Vec<Detection>> {
    let gt_boxes: Vec<BBox> = gts.iter().map(|a| a.bbox).collect();
    let mut kept = Vec::new();
    for d in dets {
        if d.p_obj < params.obj_prefilter {
            continue;
        }
        let (iou, _) = max_iou(&d.bbox, &gt_boxes)?;
        if iou <= params.theta1 {
            kept.push(d.clone());
        }
    }
    if let Some(t) = params.dedup_iou {
        kept.sort_by(|a, b| b.p_obj.total_cmp(&a.p_obj).then(a.source.cmp(&b.source)));
        let mut survivors: Vec<Detection> = Vec::with_capacity(kept.len());
        for d in kept {
            if survivors.iter().all(|s| s.bbox.iou(&d.bbox) <= t) {
                survivors.push(d);
            }
        }
        kept = survivors;
    }
    kept.sort_by_key(|d| d.source);
    Ok(kept)
}

/// `beta * p_det + (1 - beta) * h`, where `h` is the ensemble prediction
/// without its rejection entry, renormalized over the `K` classes of interest.
pub fn mix_class(p_det: &[f64], hbar: &[f64], beta: f64) -> Vec<f64> {
    let k = p_det.len();
    assert_eq!(hbar.len(), k + 1, "ensemble prediction must have K + 1 entries");
    let mass: f64 = hbar[..k].iter().sum();
    assert!(mass > 0.0, "ensemble prediction has no mass on the classes of interest");
    p_det
        .iter()
        .zip(&hbar[..k])
        .map(|(p, h)| beta * p + (1.0 - beta) * h / mass)
        .collect()
}

/// Largest ensemble probability among the classes of interest (not renormalized).
pub fn pseudo_object(hbar: &[f64]) -> f64 {
    ProxyPrediction::new(hbar.to_vec()).max_of_interest()
}

/// Whether an ensemble prediction passes the gate: its argmax is not the
/// rejection class and its best class of interest reaches `theta2`.
pub fn passes_gate(hbar: &ProxyPrediction, theta2: f64) -> bool {
    hbar.argmax() != hbar.reject_index() && hbar.max_of_interest() >= theta2
}

/// Pseudo-labels for one image. `image` is the detector input the output was
/// computed from. The rng is consumed once per patch-drop copy, candidates in
/// source-anchor order.
#[allow(clippy::too_many_arguments)]
pub fn generate<P: Proxy + ?Sized>(
    image: &Patch,
    output: &DetectorOutput,
    anchors: &[AnchorSpec],
    gts: &[Annotation],
    proxy: &P,
    params: &PseudoLabelParams,
    epoch: usize,
    rng: &mut Rng,
) -> Result<(PseudoLabelSet, PseudoStats)> {
    let mut stats = PseudoStats::default();
    if epoch < params.warmup_epochs {
        return Ok((PseudoLabelSet::default(), stats));
    }
    if proxy.num_outputs() != output.num_classes + 1 {
        return Err(Error::Config(format!(
            "proxy predicts {} classes, detector has {} (+1 rejection expected)",
            proxy.num_outputs(),
            output.num_classes
        )));
    }
    let dets = decode(output, anchors, 0.0, None)?;
    let candidates = candidate_rois(&dets, gts, params)?;
    stats.filtered = output.preds.len() - candidates.len();
    let mut set = PseudoLabelSet::default();
    for det in candidates {
        let Some((x0, y0, x1, y1)) = pixel_rect(&det.bbox, image.width, image.height) else {
            stats.degenerate += 1;
            continue;
        };
        stats.candidates += 1;
        let crop = image.sub(x0, y0, x1, y1);
        let (padded, _) = pad_to_nearest(&crop, proxy.centers());
        let hbar = ensemble_predict(proxy, &padded, params.m, params.s, rng)?;
        if !passes_gate(&hbar, params.theta2) {
            stats.gated_out += 1;
            continue;
        }
        set.labels.push(PseudoLabel {
            bbox: det.bbox,
            class_probs: mix_class(&det.class_probs, &hbar.probs, params.beta),
            obj_prob: pseudo_object(&hbar.probs),
            source: det.source,
            epoch,
            hbar: hbar.probs,
        });
    }
    stats.emitted = set.len();
    Ok((set, stats))
}
