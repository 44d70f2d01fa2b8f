//! Detector losses. The class and objectness terms are negative
//! log-likelihoods (multi-class and binary cross-entropy); the coordinate term
//! is the squared error between the ground truth and the decoded box in image
//! coordinates. All terms are sums over the image.

use serde::{Deserialize, Serialize};

use super::{sigmoid, softmax, DetectorConfig, DetectorOutput, RawOutput, TargetAssignment};
use crate::datasets::Annotation;
use crate::geometry::AnchorSpec;

/// Lower bound applied to every probability inside a logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

#[inline]
pub(crate) fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub coord: f64,
    pub obj: f64,
    /// Number of objectness terms that entered `obj`.
    pub obj_terms: usize,
    /// `lambda_cls * cls + lambda_coord * coord + lambda_obj * obj`.
    pub total: f64,
}

pub fn loss_class(assign: &TargetAssignment, out: &DetectorOutput, gts: &[Annotation]) -> f64 {
    assign
        .responsible_anchors()
        .map(|(idx, r)| {
            let k = gts[r.gt].class_id as usize - 1;
            -floored_ln(out.at(idx).p_cls[k])
        })
        .sum()
}

pub fn loss_coord(
    assign: &TargetAssignment,
    out: &DetectorOutput,
    gts: &[Annotation],
    anchors: &[AnchorSpec],
) -> f64 {
    assign
        .responsible_anchors()
        .map(|(idx, r)| {
            let p = out.at(idx);
            let cell = idx.cell(out.grid);
            let gt = &gts[r.gt].bbox;
            let anchor = anchors[idx.a];
            let bx = cell.x0() + p.rel.dx;
            let by = cell.y0() + p.rel.dy;
            let bw = anchor.w * p.rel.log_w.exp();
            let bh = anchor.h * p.rel.log_h.exp();
            (gt.cx - bx).powi(2) + (gt.cy - by).powi(2) + (gt.w - bw).powi(2) + (gt.h - bh).powi(2)
        })
        .sum()
}

/// Floored binary cross-entropy; `target` may be soft.
pub fn bce(target: f64, p: f64) -> f64 {
    -(target * floored_ln(p) + (1.0 - target) * floored_ln(1.0 - p))
}

/// Binary cross-entropy over every anchor of every cell.
pub fn loss_object(assign: &TargetAssignment, out: &DetectorOutput) -> f64 {
    out.preds
        .iter()
        .zip(&assign.objectness)
        .map(|(p, &t)| bce(t as f64, p.p_obj))
        .sum()
}

pub fn loss_total(
    assign: &TargetAssignment,
    out: &DetectorOutput,
    gts: &[Annotation],
    cfg: &DetectorConfig,
) -> LossBreakdown {
    let cls = loss_class(assign, out, gts);
    let coord = loss_coord(assign, out, gts, &cfg.anchors);
    let obj = loss_object(assign, out);
    LossBreakdown {
        cls,
        coord,
        obj,
        obj_terms: out.preds.len(),
        total: cfg.lambda_cls * cls + cfg.lambda_coord * coord + cfg.lambda_obj * obj,
    }
}

/// Gradient of `-ln max(p_k, floor)` with respect to the softmax logits,
/// accumulated into `grad` with weight `scale`.
pub fn softmax_nll_grad(p: &[f64], k: usize, scale: f64, grad: &mut [f64]) {
    if p[k] < PROB_FLOOR {
        return;
    }
    for (j, g) in grad.iter_mut().enumerate() {
        let onehot = if j == k { 1.0 } else { 0.0 };
        *g += scale * (p[j] - onehot);
    }
}

/// Gradient of the floored binary cross-entropy with respect to the logit of `p`.
pub fn bce_logit_grad(target: f64, p: f64) -> f64 {
    let mut g = 0.0;
    if p >= PROB_FLOOR {
        g -= target * (1.0 - p);
    }
    if 1.0 - p >= PROB_FLOOR {
        g += (1.0 - target) * p;
    }
    g
}

/// [`loss_total`] evaluated on raw outputs together with its gradient with
/// respect to them. Anchors flagged in `skip_obj` contribute no objectness
/// term (their objectness is supervised elsewhere).
pub fn loss_total_grad(
    assign: &TargetAssignment,
    raw: &RawOutput,
    gts: &[Annotation],
    cfg: &DetectorConfig,
    skip_obj: Option<&[bool]>,
) -> (LossBreakdown, Vec<f64>) {
    let stride = raw.stride();
    let g = raw.grid;
    let gf = g as f64;
    let mut grad = vec![0.0; raw.data.len()];
    let mut out = LossBreakdown::default();

    for (idx, r) in assign.responsible_anchors() {
        let flat = idx.flat(g, raw.num_anchors);
        let s = raw.slot(flat);
        let gs = &mut grad[flat * stride..(flat + 1) * stride];
        let gt = &gts[r.gt];

        let p = softmax(&s[5..]);
        let k = gt.class_id as usize - 1;
        out.cls -= floored_ln(p[k]);
        softmax_nll_grad(&p, k, cfg.lambda_cls, &mut gs[5..]);

        let cell = idx.cell(g);
        let anchor = cfg.anchors[idx.a];
        let sx = sigmoid(s[0]);
        let sy = sigmoid(s[1]);
        let bx = cell.x0() + sx / gf;
        let by = cell.y0() + sy / gf;
        let bw = anchor.w * s[2].exp();
        let bh = anchor.h * s[3].exp();
        let b = &gt.bbox;
        out.coord += (b.cx - bx).powi(2) + (b.cy - by).powi(2) + (b.w - bw).powi(2) + (b.h - bh).powi(2);
        let lc = cfg.lambda_coord;
        gs[0] += lc * -2.0 * (b.cx - bx) * sx * (1.0 - sx) / gf;
        gs[1] += lc * -2.0 * (b.cy - by) * sy * (1.0 - sy) / gf;
        gs[2] += lc * -2.0 * (b.w - bw) * bw;
        gs[3] += lc * -2.0 * (b.h - bh) * bh;
    }

    for flat in 0..raw.num_slots() {
        if skip_obj.is_some_and(|m| m[flat]) {
            continue;
        }
        let t = assign.objectness[flat] as f64;
        let p = sigmoid(raw.slot(flat)[4]);
        out.obj += bce(t, p);
        out.obj_terms += 1;
        grad[flat * stride + 4] += cfg.lambda_obj * bce_logit_grad(t, p);
    }

    out.total = cfg.lambda_cls * out.cls + cfg.lambda_coord * out.coord + cfg.lambda_obj * out.obj;
    (out, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{assign_targets, AnchorIndex, AnchorPrediction, RawOutput};
    use crate::geometry::{BBox, RelBox};

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            grid: 4,
            num_classes: 2,
            anchors: vec![AnchorSpec { w: 0.2, h: 0.2 }],
            tau: 0.3,
            ..Default::default()
        }
    }

    fn uniform_output(cfg: &DetectorConfig, p_obj: f64, p_cls: Vec<f64>) -> DetectorOutput {
        let n = cfg.grid * cfg.grid * cfg.num_anchors();
        DetectorOutput {
            grid: cfg.grid,
            num_anchors: cfg.num_anchors(),
            num_classes: cfg.num_classes,
            preds: vec![
                AnchorPrediction {
                    rel: RelBox {
                        dx: 0.0,
                        dy: 0.0,
                        log_w: 0.0,
                        log_h: 0.0
                    },
                    p_obj,
                    p_cls,
                };
                n
            ],
        }
    }

    fn one_gt() -> Vec<Annotation> {
        vec![Annotation {
            bbox: BBox::new(0.5, 0.5, 0.2, 0.2),
            class_id: 1,
        }]
    }

    #[test]
    fn class_loss_values() {
        let c = cfg();
        let empty = assign_targets(&[], &c);
        let out = uniform_output(&c, 0.5, vec![0.5, 0.5]);
        assert_eq!(loss_class(&empty, &out, &[]), 0.0);

        let gts = one_gt();
        let a = assign_targets(&gts, &c);
        let perfect = uniform_output(&c, 0.5, vec![1.0, 0.0]);
        assert_eq!(loss_class(&a, &perfect, &gts), 0.0);
        assert!((loss_class(&a, &out, &gts) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn coordinate_loss_values() {
        let c = cfg();
        let gts = one_gt();
        let a = assign_targets(&gts, &c);
        let (idx, _) = a.responsible_anchors().next().unwrap();
        assert_eq!(idx, AnchorIndex { i: 2, j: 2, a: 0 });
        let mut out = uniform_output(&c, 0.5, vec![0.5, 0.5]);
        let flat = idx.flat(4, 1);
        // cell (2,2) has its corner at 0.5, so zero offset decodes to the gt center
        out.preds[flat].rel = RelBox {
            dx: 0.0,
            dy: 0.0,
            log_w: 0.0,
            log_h: 0.0,
        };
        assert_eq!(loss_coord(&a, &out, &gts, &c.anchors), 0.0);
        assert_eq!(loss_coord(&assign_targets(&[], &c), &out, &[], &c.anchors), 0.0);

        // decoded (0.6, 0.5, 0.2, 0.1) against gt (0.5, 0.5, 0.2, 0.2)
        out.preds[flat].rel = RelBox {
            dx: 0.1,
            dy: 0.0,
            log_w: 0.0,
            log_h: 0.5f64.ln(),
        };
        assert!((loss_coord(&a, &out, &gts, &c.anchors) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn object_loss_values() {
        assert_eq!(bce(1.0, 1.0), 0.0);
        assert_eq!(bce(0.0, 0.0), 0.0);
        assert!((bce(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-12);

        let c = cfg();
        let gts = one_gt();
        let a = assign_targets(&gts, &c);
        let out = uniform_output(&c, 0.5, vec![0.5, 0.5]);
        let l = loss_object(&a, &out);
        assert!((l - 16.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum_and_ignores_objectness_without_weight() {
        let c = DetectorConfig {
            lambda_obj: 0.0,
            lambda_cls: 2.0,
            ..cfg()
        };
        let gts = one_gt();
        let a = assign_targets(&gts, &c);
        let o1 = uniform_output(&c, 0.2, vec![0.5, 0.5]);
        let o2 = uniform_output(&c, 0.9, vec![0.5, 0.5]);
        let l1 = loss_total(&a, &o1, &gts, &c);
        assert_eq!(l1.total, loss_total(&a, &o2, &gts, &c).total);
        assert!((l1.total - (2.0 * l1.cls + l1.coord)).abs() < 1e-12);
        assert_eq!(l1.obj_terms, 16);

        let zero = uniform_output(&c, 0.0, vec![1.0, 0.0]);
        let empty = assign_targets(&[], &c);
        assert_eq!(loss_total(&empty, &zero, &[], &c).total, 0.0);
    }

    #[test]
    fn raw_path_agrees_with_activated_path() {
        let c = DetectorConfig {
            lambda_coord: 3.0,
            ..cfg()
        };
        let gts = one_gt();
        let a = assign_targets(&gts, &c);
        let mut raw = RawOutput::zeros(&c);
        for (i, v) in raw.data.iter_mut().enumerate() {
            *v = ((i * 31) % 13) as f64 / 6.0 - 1.0;
        }
        let out = DetectorOutput::from_raw(&raw);
        let direct = loss_total(&a, &out, &gts, &c);
        let (via_raw, _) = loss_total_grad(&a, &raw, &gts, &c, None);
        assert!((direct.total - via_raw.total).abs() < 1e-12);
        assert_eq!(via_raw.obj_terms, 16);
    }
}
