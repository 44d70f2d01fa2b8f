//! Grid detector: `[g, g, A, 5 + K]` output volume, target assignment,
//! losses and decoding.

mod decode;
mod loss;
mod network;
mod targets;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorSpec, BBox, GridCell, RelBox};

pub use decode::{decode, nms, Detection};
pub use loss::{
    bce, bce_logit_grad, loss_class, loss_coord, loss_object, loss_total, loss_total_grad,
    softmax_nll_grad, LossBreakdown, PROB_FLOOR,
};
pub use network::{DetectorCheckpoint, DetectorNet, DETECTOR_SCHEMA};
pub use targets::{assign_targets, Responsible, TargetAssignment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub grid: usize,
    pub num_classes: usize,
    pub anchors: Vec<AnchorSpec>,
    /// IoU gate for the class and coordinate losses.
    pub tau: f64,
    pub lambda_cls: f64,
    pub lambda_coord: f64,
    pub lambda_obj: f64,
    /// Output channels of the stride-2 stages; `input_size / 2^len` must equal `grid`.
    pub widths: Vec<usize>,
    /// Stride-1 3x3 convolutions after the last stage.
    pub extra_convs: usize,
    /// Initial objectness logit bias.
    pub obj_bias_init: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 48,
            grid: 6,
            num_classes: 6,
            anchors: vec![AnchorSpec { w: 0.22, h: 0.22 }, AnchorSpec { w: 0.34, h: 0.34 }],
            tau: 0.5,
            lambda_cls: 1.0,
            lambda_coord: 1.0,
            lambda_obj: 1.0,
            widths: vec![16, 32, 64],
            extra_convs: 1,
            obj_bias_init: -4.0,
        }
    }
}

impl DetectorConfig {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Values per anchor: 4 box terms, objectness, `K` class logits.
    pub fn values_per_anchor(&self) -> usize {
        5 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector: {m}")));
        if self.grid < 2 {
            return bad("grid must be at least 2");
        }
        if self.anchors.is_empty() {
            return bad("need at least one anchor");
        }
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.anchors.iter().any(|a| !(a.w > 0.0 && a.h > 0.0)) {
            return bad("anchor sizes must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if [self.lambda_cls, self.lambda_coord, self.lambda_obj]
            .iter()
            .any(|l| !(*l >= 0.0))
        {
            return bad("loss weights must be non-negative");
        }
        if self.widths.is_empty() || self.input_size >> self.widths.len() != self.grid
            || self.input_size % (1 << self.widths.len()) != 0
        {
            return bad("input_size / 2^stages must equal grid");
        }
        Ok(())
    }
}

/// `(i, j, a)` position of an anchor in the output volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnchorIndex {
    pub i: usize,
    pub j: usize,
    pub a: usize,
}

impl AnchorIndex {
    pub fn flat(&self, g: usize, num_anchors: usize) -> usize {
        (self.i * g + self.j) * num_anchors + self.a
    }

    pub fn from_flat(idx: usize, g: usize, num_anchors: usize) -> Self {
        let a = idx % num_anchors;
        let cell = idx / num_anchors;
        Self {
            i: cell / g,
            j: cell % g,
            a,
        }
    }

    pub fn cell(&self, g: usize) -> GridCell {
        GridCell { i: self.i, j: self.j, g }
    }
}

/// Raw network outputs of one image, `[g, g, A, 5 + K]` row-major:
/// `(t_x, t_y, t_w, t_h, t_obj, class logits...)` per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    pub grid: usize,
    pub num_anchors: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl RawOutput {
    pub fn zeros(cfg: &DetectorConfig) -> Self {
        Self {
            grid: cfg.grid,
            num_anchors: cfg.num_anchors(),
            num_classes: cfg.num_classes,
            data: vec![0.0; cfg.grid * cfg.grid * cfg.num_anchors() * cfg.values_per_anchor()],
        }
    }

    pub fn stride(&self) -> usize {
        5 + self.num_classes
    }

    pub fn num_slots(&self) -> usize {
        self.grid * self.grid * self.num_anchors
    }

    pub fn slot(&self, flat: usize) -> &[f64] {
        let s = self.stride();
        &self.data[flat * s..(flat + 1) * s]
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Prediction of one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPrediction {
    pub rel: RelBox,
    pub p_obj: f64,
    pub p_cls: Vec<f64>,
}

/// Activated output volume: grid-relative boxes, objectness and class
/// distributions for every `(i, j, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub grid: usize,
    pub num_anchors: usize,
    pub num_classes: usize,
    pub preds: Vec<AnchorPrediction>,
}

impl DetectorOutput {
    /// Center offsets are squashed to `[0, 1/g]`, objectness by a sigmoid and
    /// class logits by a softmax.
    pub fn from_raw(raw: &RawOutput) -> Self {
        let g = raw.grid as f64;
        let preds = (0..raw.num_slots())
            .map(|flat| {
                let s = raw.slot(flat);
                AnchorPrediction {
                    rel: RelBox {
                        dx: sigmoid(s[0]) / g,
                        dy: sigmoid(s[1]) / g,
                        log_w: s[2],
                        log_h: s[3],
                    },
                    p_obj: sigmoid(s[4]),
                    p_cls: softmax(&s[5..]),
                }
            })
            .collect();
        Self {
            grid: raw.grid,
            num_anchors: raw.num_anchors,
            num_classes: raw.num_classes,
            preds,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.grid, self.grid, self.num_anchors, 5 + self.num_classes]
    }

    pub fn at(&self, idx: AnchorIndex) -> &AnchorPrediction {
        &self.preds[idx.flat(self.grid, self.num_anchors)]
    }

    /// Image-space box predicted at `idx`.
    pub fn decoded_box(&self, idx: AnchorIndex, anchors: &[AnchorSpec]) -> Result<BBox> {
        crate::geometry::decode_to_image(&self.at(idx).rel, &idx.cell(self.grid), &anchors[idx.a])
    }
}
