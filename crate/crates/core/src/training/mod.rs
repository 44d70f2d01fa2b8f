//! Detector training for the three arms: `baseline` and `ours` on the merged
//! dataset, `upper` on the fully labelled one. In `ours`, pseudo-labels are
//! regenerated from the current detector at every step and add a KL class
//! term and a soft objectness term at their source anchors.

mod pseudo_loss;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{Annotation, DatasetManifest, ImageStore};
use crate::detector::{
    assign_targets, loss_total_grad, DetectorCheckpoint, DetectorConfig, DetectorNet, DetectorOutput,
    LossBreakdown,
};
use crate::error::{Error, Result};
use crate::nn::{grad_norm, Sgd, SgdConfig};
use crate::patch::Patch;
use crate::proxy::Proxy;
use crate::pseudolabel::{generate, PseudoLabel, PseudoLabelParams, PseudoStats};
use crate::rng::{derive_seed, rng_for, stream, Rng};

pub use pseudo_loss::{loss_pseudo_class, loss_pseudo_class_grad, loss_pseudo_object, loss_pseudo_object_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Ours,
    Upper,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::Ours, Mode::Upper];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ours => "ours",
            Mode::Upper => "upper",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "ours" => Ok(Mode::Ours),
            "upper" => Ok(Mode::Upper),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected baseline, ours or upper)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: SgdConfig,
    pub lambda_pcls: f64,
    pub lambda_pobj: f64,
    /// Keep the ordinary objectness term at pseudo-labelled anchors instead of
    /// replacing it by the pseudo objectness term.
    pub keep_object_term: bool,
    /// Elementwise bound on the per-image gradient with respect to the raw
    /// head outputs; `0` disables it. Ordinary gradients stay below 1 in
    /// magnitude; the bound only catches width/height blow-ups of the
    /// exponential box parametrisation.
    pub output_grad_clip: f64,
    pub pseudo: PseudoLabelParams,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            optimizer: SgdConfig {
                lr: 0.01,
                milestones: vec![20, 26],
                ..Default::default()
            },
            lambda_pcls: 1.0,
            lambda_pobj: 1.0,
            keep_object_term: false,
            output_grad_clip: 1.0,
            pseudo: PseudoLabelParams::default(),
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.pseudo.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_pcls >= 0.0 && self.lambda_pobj >= 0.0) {
            return Err(Error::Config("pseudo-loss weights must be non-negative".into()));
        }
        if !(self.output_grad_clip >= 0.0) {
            return Err(Error::Config("output_grad_clip must be non-negative".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Whether a pseudo-labelled anchor drops its ordinary objectness term.
    fn replaces_object_term(&self) -> bool {
        !self.keep_object_term && self.lambda_pobj > 0.0
    }
}

/// Per-epoch training summary. Losses are means over images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub images: usize,
    pub cls: f64,
    pub coord: f64,
    pub obj: f64,
    pub pcls: f64,
    pub pobj: f64,
    pub total: f64,
    pub pseudo: PseudoStats,
    /// Pseudo-labels dropped because their anchor already has a ground truth.
    pub pseudo_overridden: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Loss terms of one image, each already a sum over the image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageLoss {
    pub detector: LossBreakdown,
    pub pcls: f64,
    pub pobj: f64,
    pub total: f64,
}

/// Loss and raw-output gradient of one image given its pseudo-labels.
pub fn image_loss_grad(
    raw: &crate::detector::RawOutput,
    gts: &[Annotation],
    pseudo: &[PseudoLabel],
    config: &TrainConfig,
) -> (ImageLoss, Vec<f64>) {
    let cfg = &config.detector;
    let assign = assign_targets(gts, cfg);
    let skip = (config.replaces_object_term() && !pseudo.is_empty()).then(|| {
        let mut mask = vec![false; raw.num_slots()];
        for l in pseudo {
            mask[l.source.flat(raw.grid, raw.num_anchors)] = true;
        }
        mask
    });
    let (detector, mut grad) = loss_total_grad(&assign, raw, gts, cfg, skip.as_deref());
    let stride = raw.stride();
    let (mut pcls, mut pobj) = (0.0, 0.0);
    for l in pseudo {
        let flat = l.source.flat(raw.grid, raw.num_anchors);
        let slot = raw.slot(flat);
        let (lc, gc) = loss_pseudo_class_grad(&l.class_probs, &slot[5..]);
        let (lo, go) = loss_pseudo_object_grad(l.obj_prob, slot[4]);
        pcls += lc;
        pobj += lo;
        let g = &mut grad[flat * stride..(flat + 1) * stride];
        g[4] += config.lambda_pobj * go;
        for (gi, v) in g[5..].iter_mut().zip(&gc) {
            *gi += config.lambda_pcls * v;
        }
    }
    let total = detector.total + config.lambda_pcls * pcls + config.lambda_pobj * pobj;
    (
        ImageLoss {
            detector,
            pcls,
            pobj,
            total,
        },
        grad,
    )
}

/// One training sample: detector input, ground truths and a stable index
/// used to derive its pseudo-label rng.
pub struct Sample<'a> {
    pub id: &'a str,
    pub index: usize,
    pub image: &'a Patch,
    pub gts: &'a [Annotation],
}

#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    pub losses: Vec<ImageLoss>,
    pub pseudo: Vec<Vec<PseudoLabel>>,
    pub stats: PseudoStats,
    pub overridden: usize,
    pub grad_norm: f64,
}

/// Rng of the pseudo-label generator for one image at one epoch; independent
/// of batch composition and of every other stream.
pub fn pseudo_rng(seed: u64, epoch: usize, index: usize) -> Rng {
    rng_for(seed, stream::PSEUDO, derive_seed(epoch as u64, 0, index as u64))
}

/// Forward, pseudo-labelling (mode `ours`), loss, backward and one optimizer
/// update on a batch. The objective is the mean over images of the per-image
/// summed losses.
pub fn train_step(
    model: &mut DetectorNet,
    opt: &mut Sgd,
    batch: &[Sample<'_>],
    proxy: Option<&dyn Proxy>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<StepOutput> {
    let images: Vec<&Patch> = batch.iter().map(|s| s.image).collect();
    let (raws, cache) = model.forward_train(&images)?;
    let scale = 1.0 / batch.len() as f64;
    let mut out = StepOutput::default();
    let mut grads = Vec::with_capacity(batch.len());
    let use_pseudo = config.mode == Mode::Ours && epoch >= config.pseudo.warmup_epochs;
    for (sample, raw) in batch.iter().zip(&raws) {
        let mut labels = Vec::new();
        if use_pseudo {
            let proxy = proxy.ok_or_else(|| Error::Config("mode ours requires a proxy".into()))?;
            let decoded = DetectorOutput::from_raw(raw);
            let mut rng = pseudo_rng(config.seed, epoch, sample.index);
            let (set, stats) = generate(
                sample.image,
                &decoded,
                &config.detector.anchors,
                sample.gts,
                proxy,
                &config.pseudo,
                epoch,
                &mut rng,
            )?;
            out.stats += stats;
            let assign = assign_targets(sample.gts, &config.detector);
            for l in set.labels {
                if assign.target_at(l.source) == 1 {
                    out.overridden += 1;
                } else {
                    labels.push(l);
                }
            }
        }
        let (loss, mut grad) = image_loss_grad(raw, sample.gts, &labels, config);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch}, image {}: loss {:?}",
                sample.id, loss
            )));
        }
        let clip = config.output_grad_clip;
        for g in &mut grad {
            if clip > 0.0 {
                *g = g.clamp(-clip, clip);
            }
            *g *= scale;
        }
        grads.push(grad);
        out.losses.push(loss);
        out.pseudo.push(labels);
    }
    let param_grads = model.backward(cache, &grads);
    out.grad_norm = grad_norm(&param_grads);
    if !out.grad_norm.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.id).collect();
        return Err(Error::NonFinite(format!("epoch {epoch}: gradient norm on images {ids:?}")));
    }
    opt.step(model.params_mut(), &param_grads, epoch);
    if !model.all_finite() {
        return Err(Error::NonFinite(format!("epoch {epoch}: parameters after update")));
    }
    Ok(out)
}

/// One line of the pseudo-label audit dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub epoch: usize,
    pub image: String,
    pub cell: [usize; 2],
    pub anchor: usize,
    #[serde(rename = "box")]
    pub bbox: crate::geometry::BBox,
    pub pobj: f64,
    pub pcls: Vec<f64>,
    pub hbar: Vec<f64>,
}

impl AuditRecord {
    pub fn new(image: &str, l: &PseudoLabel) -> Self {
        Self {
            epoch: l.epoch,
            image: image.to_string(),
            cell: [l.source.i, l.source.j],
            anchor: l.source.a,
            bbox: l.bbox,
            pobj: l.obj_prob,
            pcls: l.class_probs.clone(),
            hbar: l.hbar.clone(),
        }
    }
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Files written by [`run_training`] under its output directory.
pub struct TrainFiles {
    pub dir: PathBuf,
}

impl TrainFiles {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.jsonl")
    }
    pub fn audit(&self, epoch: usize) -> PathBuf {
        self.dir.join("audit").join(format!("epoch_{epoch:03}.jsonl"))
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub checkpoint: DetectorCheckpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Loads every image of a manifest as a detector input patch.
pub fn load_images(manifest: &DatasetManifest, store: &ImageStore) -> Result<Vec<Patch>> {
    manifest
        .records
        .iter()
        .map(|r| store.load(&r.path).map(|img| Patch::from_rgb(&img)))
        .collect()
}

fn check_manifest(manifest: &DatasetManifest, cfg: &DetectorConfig) -> Result<()> {
    manifest.validate()?;
    let k = cfg.num_classes as u32;
    if manifest.classes.len() != cfg.num_classes || manifest.classes.keys().any(|&c| c == 0 || c > k) {
        return Err(Error::Config(format!(
            "manifest classes {:?} do not match the detector's {} classes (ids 1..={k})",
            manifest.classes.keys().collect::<Vec<_>>(),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Trains a detector. `resume` continues from a checkpoint, keeping its epoch
/// counter and optimizer state. When `out_dir` is given, the checkpoint,
/// per-epoch metrics (`metrics.jsonl`), wall times (`timing.jsonl`) and, in
/// mode `ours`, pseudo-label audit dumps are written there after every epoch.
pub fn run_training(
    manifest: &DatasetManifest,
    images: &[Patch],
    config: &TrainConfig,
    proxy: Option<&dyn Proxy>,
    resume: Option<DetectorCheckpoint>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_manifest(manifest, &config.detector)?;
    if images.len() != manifest.records.len() {
        return Err(Error::Shape(format!(
            "{} images for {} records",
            images.len(),
            manifest.records.len()
        )));
    }
    if config.mode == Mode::Ours && proxy.is_none() {
        return Err(Error::Config("mode ours requires a proxy checkpoint".into()));
    }
    let proxy = if config.mode == Mode::Ours { proxy } else { None };

    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            if ck.model.config != config.detector {
                return Err(Error::Checkpoint("resume checkpoint has a different detector config".into()));
            }
            let opt = ck.optimizer.unwrap_or_else(|| Sgd::new(config.optimizer.clone()));
            (ck.model, opt, ck.epoch)
        }
        None => (
            DetectorNet::new(config.detector.clone(), config.seed)?,
            Sgd::new(config.optimizer.clone()),
            0,
        ),
    };
    opt.config = config.optimizer.clone();

    let files = out_dir.map(|d| TrainFiles { dir: d.to_path_buf() });
    if let Some(f) = &files {
        fs::create_dir_all(&f.dir).map_err(|e| Error::io(&f.dir, e))?;
        if config.mode == Mode::Ours {
            let audit = f.dir.join("audit");
            fs::create_dir_all(&audit).map_err(|e| Error::io(&audit, e))?;
        }
    }

    let mut metrics = Vec::new();
    for epoch in start..config.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..manifest.records.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng_for(config.seed, stream::SHUFFLE, epoch as u64));
        let mut m = EpochMetrics {
            epoch,
            lr: config.optimizer.lr_at(epoch),
            ..Default::default()
        };
        let mut audit_lines = Vec::new();
        let mut norm_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample<'_>> = chunk
                .iter()
                .map(|&i| Sample {
                    id: &manifest.records[i].id,
                    index: i,
                    image: &images[i],
                    gts: &manifest.records[i].annotations,
                })
                .collect();
            let out = train_step(&mut model, &mut opt, &batch, proxy, config, epoch)?;
            for (s, (l, labels)) in batch.iter().zip(out.losses.iter().zip(&out.pseudo)) {
                m.images += 1;
                m.cls += l.detector.cls;
                m.coord += l.detector.coord;
                m.obj += l.detector.obj;
                m.pcls += l.pcls;
                m.pobj += l.pobj;
                m.total += l.total;
                for p in labels {
                    audit_lines.push(serde_json::to_string(&AuditRecord::new(s.id, p))?);
                }
            }
            m.pseudo += out.stats;
            m.pseudo_overridden += out.overridden;
            norm_sum += out.grad_norm;
            steps += 1;
        }
        let n = m.images.max(1) as f64;
        for v in [&mut m.cls, &mut m.coord, &mut m.obj, &mut m.pcls, &mut m.pobj, &mut m.total] {
            *v /= n;
        }
        m.grad_norm = norm_sum / steps.max(1) as f64;
        let secs = t0.elapsed().as_secs_f64();
        log::info!(
            "[{}] epoch {epoch}: total {:.4} (cls {:.4} coord {:.4} obj {:.4} pcls {:.4} pobj {:.4}) pseudo {} in {secs:.1}s",
            config.mode,
            m.total,
            m.cls,
            m.coord,
            m.obj,
            m.pcls,
            m.pobj,
            m.pseudo.emitted
        );
        if let Some(f) = &files {
            append_line(&f.metrics(), &serde_json::to_string(&m)?)?;
            append_line(&f.timing(), &serde_json::json!({"epoch": epoch, "seconds": secs}).to_string())?;
            if config.mode == Mode::Ours {
                let path = f.audit(epoch);
                let mut text = audit_lines.join("\n");
                if !text.is_empty() {
                    text.push('\n');
                }
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            DetectorCheckpoint::new(model.clone(), epoch + 1, Some(opt.clone()), config.mode.name())
                .save(&f.checkpoint())?;
        }
        metrics.push(m);
    }
    let checkpoint = DetectorCheckpoint::new(model, config.epochs.max(start), Some(opt), config.mode.name());
    if let Some(f) = &files {
        checkpoint.save(&f.checkpoint())?;
    }
    Ok(TrainOutcome { checkpoint, metrics })
}
