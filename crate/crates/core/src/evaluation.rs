//! Mean average precision at IoU 0.5 and the side-by-side comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{Annotation, ClassId, DatasetManifest};
use crate::detector::{decode, Detection, DetectorNet};
use crate::error::{Error, Result};
use crate::patch::Patch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub obj_threshold: f64,
    pub nms_iou: f64,
    pub iou_threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            obj_threshold: 0.01,
            nms_iou: 0.45,
            iou_threshold: 0.5,
            batch_size: 64,
        }
    }
}

/// Greedy matching of score-sorted detections against one image's ground
/// truths: a detection is a true positive when the unmatched ground truth of
/// its class with the highest IoU reaches `iou_thr`.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.class_id != d.class_id {
                    continue;
                }
                let iou = d.bbox.iou(&gt.bbox);
                if iou >= iou_thr && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            match best {
                Some((_, g)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP of score-ordered TP flags. `None` when there is
/// no ground truth.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub name: String,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Thresholds and model identity the report was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub obj_threshold: f64,
    pub nms_iou: f64,
    pub iou_threshold: f64,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with at least one ground truth.
    pub map: f64,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_gt: usize,
    pub fingerprint: Fingerprint,
}

/// Scores already decoded detections (one list per manifest record).
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    manifest: &DatasetManifest,
    config: &EvalConfig,
    model: &str,
) -> Result<EvalReport> {
    if detections.len() != manifest.records.len() {
        return Err(Error::Evaluation(format!(
            "{} detection lists for {} images",
            detections.len(),
            manifest.records.len()
        )));
    }
    let mut per_class = Vec::new();
    let mut sum = 0.0;
    let mut present = 0usize;
    for (&class_id, name) in &manifest.classes {
        let mut scored: Vec<(f64, usize, usize)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for (k, d) in dets.iter().enumerate() {
                if d.class_id == class_id {
                    scored.push((d.score, img, k));
                }
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used: Vec<Vec<bool>> = manifest
            .records
            .iter()
            .map(|r| vec![false; r.annotations.len()])
            .collect();
        let mut flags = Vec::with_capacity(scored.len());
        for &(_, img, k) in &scored {
            let d = &detections[img][k];
            let gts = &manifest.records[img].annotations;
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[img][g] || gt.class_id != class_id {
                    continue;
                }
                let iou = d.bbox.iou(&gt.bbox);
                if iou >= config.iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
            if let Some((_, g)) = best {
                used[img][g] = true;
            }
            flags.push(best.is_some());
        }
        let n_gt = manifest
            .records
            .iter()
            .flat_map(|r| &r.annotations)
            .filter(|a| a.class_id == class_id)
            .count();
        let ap = average_precision(&flags, n_gt);
        match ap {
            Some(v) => {
                sum += v;
                present += 1;
            }
            None if !scored.is_empty() => {
                log::warn!("class {name}: {} detections but no ground truth; excluded from the mean", scored.len())
            }
            None => {}
        }
        per_class.push(ClassAp {
            class_id,
            name: name.clone(),
            ap,
            n_gt,
            n_det: scored.len(),
        });
    }
    Ok(EvalReport {
        per_class,
        map: if present > 0 { sum / present as f64 } else { 0.0 },
        num_images: manifest.records.len(),
        num_detections: detections.iter().map(Vec::len).sum(),
        num_gt: manifest.num_annotations(),
        fingerprint: Fingerprint {
            obj_threshold: config.obj_threshold,
            nms_iou: config.nms_iou,
            iou_threshold: config.iou_threshold,
            model: model.to_string(),
        },
    })
}

/// Runs the detector on every test image and scores the decoded detections.
pub fn evaluate(
    model: &DetectorNet,
    manifest: &DatasetManifest,
    images: &[Patch],
    config: &EvalConfig,
    name: &str,
) -> Result<EvalReport> {
    if manifest.classes.len() != model.config.num_classes {
        return Err(Error::Evaluation(format!(
            "test manifest has {} classes, detector has {}",
            manifest.classes.len(),
            model.config.num_classes
        )));
    }
    let mut detections = Vec::with_capacity(images.len());
    for chunk in images.chunks(config.batch_size.max(1)) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        for out in model.forward(&refs)? {
            detections.push(decode(&out, &model.config.anchors, config.obj_threshold, Some(config.nms_iou))?);
        }
    }
    evaluate_detections(&detections, manifest, config, name)
}

/// Reports side by side: one row per class plus the mean row, one column per report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    /// AP in percent per column.
    pub values: Vec<Option<f64>>,
    /// Columns holding the row maximum.
    pub best: Vec<usize>,
}

impl Comparison {
    pub fn mean_row(&self) -> &ComparisonRow {
        self.rows.last().expect("comparison always has a mean row")
    }

    /// Mean AP of column `name`, in percent.
    pub fn mean_of(&self, name: &str) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == name)?;
        self.mean_row().values[col]
    }

    /// Aligned text table; the best value of each row is starred.
    pub fn render_text(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let col_w = self.columns.iter().map(|c| c.len()).max().unwrap_or(0).max(7) + 1;
        let mut s = String::new();
        let _ = write!(s, "{:<label_w$}", "class");
        for c in &self.columns {
            let _ = write!(s, " | {c:>col_w$}");
        }
        s.push('\n');
        let _ = writeln!(s, "{}", "-".repeat(label_w + self.columns.len() * (col_w + 3)));
        for row in &self.rows {
            let _ = write!(s, "{:<label_w$}", row.label);
            for (i, v) in row.values.iter().enumerate() {
                let cell = match v {
                    Some(v) if row.best.contains(&i) => format!("{v:.2}*"),
                    Some(v) => format!("{v:.2} "),
                    None => "- ".to_string(),
                };
                let _ = write!(s, " | {cell:>col_w$}");
            }
            s.push('\n');
        }
        s
    }
}

fn best_columns(values: &[Option<f64>]) -> Vec<usize> {
    let max = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Vec::new();
    }
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == Some(max))
        .map(|(i, _)| i)
        .collect()
}

/// Lays out named reports as a table. All reports must cover the same classes.
pub fn compare(reports: &[(String, EvalReport)]) -> Result<Comparison> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Evaluation("nothing to compare".into()));
    };
    let classes: Vec<(ClassId, &str)> = first.per_class.iter().map(|c| (c.class_id, c.name.as_str())).collect();
    for (name, r) in reports {
        let other: Vec<(ClassId, &str)> = r.per_class.iter().map(|c| (c.class_id, c.name.as_str())).collect();
        if other != classes {
            return Err(Error::Evaluation(format!("report {name} has a different class table")));
        }
    }
    let mut rows = Vec::new();
    for (k, (_, cname)) in classes.iter().enumerate() {
        let values: Vec<Option<f64>> = reports.iter().map(|(_, r)| r.per_class[k].ap.map(|a| a * 100.0)).collect();
        rows.push(ComparisonRow {
            label: cname.to_string(),
            best: best_columns(&values),
            values,
        });
    }
    let values: Vec<Option<f64>> = reports.iter().map(|(_, r)| Some(r.map * 100.0)).collect();
    rows.push(ComparisonRow {
        label: "mAP@0.5".into(),
        best: best_columns(&values),
        values,
    });
    Ok(Comparison {
        columns: reports.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

/// Averages reports of repeated runs class by class.
pub fn mean_report(reports: &[EvalReport], model: &str) -> Result<EvalReport> {
    let Some(first) = reports.first() else {
        return Err(Error::Evaluation("no reports to average".into()));
    };
    let n = reports.len() as f64;
    let mut out = first.clone();
    for (k, c) in out.per_class.iter_mut().enumerate() {
        c.ap = c.ap.map(|_| reports.iter().map(|r| r.per_class[k].ap.unwrap_or(0.0)).sum::<f64>() / n);
        c.n_det = reports.iter().map(|r| r.per_class[k].n_det).sum::<usize>() / reports.len();
    }
    out.map = reports.iter().map(|r| r.map).sum::<f64>() / n;
    out.num_detections = reports.iter().map(|r| r.num_detections).sum::<usize>() / reports.len();
    out.fingerprint.model = model.to_string();
    Ok(out)
}
