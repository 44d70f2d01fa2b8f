use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::overlay::draw_overlay;
use super::{require_path, staged, RunConfig};
use crate::datasets::{
    load_crops, load_manifest, merge, missing_rate, proxy_crops, save_crops, save_manifest, split_and_strip,
    synth_generate, ClassId, DatasetManifest, ImageStore, SynthConfig,
};
use crate::detector::DetectorCheckpoint;
use crate::error::{Error, Result};
use crate::evaluation::{compare, evaluate, mean_report, Comparison, EvalReport};
use crate::patch::Patch;
use crate::proxy::{train_proxy, Proxy, ProxyCheckpoint, ProxyTrainLog};
use crate::rng::{derive_seed, stream};
use crate::training::{load_images, read_audit, run_training, AuditRecord, EpochMetrics, Mode, TrainConfig};

/// Layout of a `synth` output directory.
#[derive(Debug, Clone)]
pub struct DataFiles {
    pub root: PathBuf,
}

impl DataFiles {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }
    /// Training images of the merged set with every in-distribution box labelled.
    pub fn full(&self) -> PathBuf {
        self.root.join("full.jsonl")
    }
    pub fn merged(&self) -> PathBuf {
        self.root.join("merged.jsonl")
    }
    pub fn test(&self) -> PathBuf {
        self.root.join("test.jsonl")
    }
    /// Fully annotated source of the proxy crops, clutter included.
    pub fn proxy_source(&self) -> PathBuf {
        self.root.join("proxy_source.jsonl")
    }
    pub fn crops(&self) -> PathBuf {
        self.root.join("crops")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn store(&self) -> ImageStore {
        ImageStore::on_disk(self.images())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub missing_rate: f64,
    pub merged_images: usize,
    pub merged_annotations: usize,
    pub full_annotations: usize,
    pub test_images: usize,
    pub proxy_crops: usize,
    /// Crops per label `1..=K+1`.
    pub crop_labels: Vec<usize>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn data_seed(config: &RunConfig, index: u64) -> Result<u64> {
    Ok(derive_seed(config.seed()?, stream::RUN_DATA, index))
}

/// Seed of the `run`-th detector training; every arm shares it.
pub(crate) fn train_seed(config: &RunConfig, run: usize) -> Result<u64> {
    Ok(derive_seed(config.seed()?, stream::RUN_TRAIN, run as u64))
}

fn split_config(config: &RunConfig, prefix: &str, images: usize, index: u64) -> Result<SynthConfig> {
    Ok(SynthConfig {
        num_images: images,
        id_prefix: prefix.into(),
        split: config.data.split_a.clone(),
        seed: data_seed(config, index)?,
        ..config.data.synth.clone()
    })
}

/// Restores the stripped labels of the merged records from their source manifests.
fn relabel(merged: &DatasetManifest, sources: &[&DatasetManifest]) -> Result<DatasetManifest> {
    let by_id: HashMap<&str, _> = sources
        .iter()
        .flat_map(|m| m.records.iter())
        .map(|r| (r.id.as_str(), r))
        .collect();
    let records = merged
        .records
        .iter()
        .map(|r| {
            by_id
                .get(r.id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::Dataset(format!("merged record {} has no source", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut provenance = merged.provenance.clone();
    provenance.push("labels restored from the unstripped halves".into());
    Ok(DatasetManifest {
        classes: merged.classes.clone(),
        records,
        provenance,
    })
}

fn build_data(config: &RunConfig, dir: &Path) -> Result<SynthSummary> {
    let files = DataFiles::new(dir);
    let (set_a, set_b) = config.data.class_sets();
    let half_a = synth_generate(&split_config(config, "a", config.data.half_images, 0)?)?;
    let half_b = synth_generate(&split_config(config, "b", config.data.half_images, 1)?)?;
    let test = synth_generate(&split_config(config, "test", config.data.test_images, 2)?)?;
    let source = synth_generate(&split_config(config, "proxy", config.data.proxy_images, 3)?)?;

    let merged = merge(
        &split_and_strip(&half_a.detection, &set_a)?,
        &split_and_strip(&half_b.detection, &set_b)?,
    )?;
    let full = relabel(&merged, &[&half_a.detection, &half_b.detection])?;
    let rate = missing_rate(&merged, &full)?;

    let in_classes: BTreeSet<ClassId> = set_a.union(&set_b).copied().collect();
    let crop_options = crate::datasets::CropOptions {
        seed: data_seed(config, 4)?,
        ..config.data.crops.clone()
    };
    let crops = proxy_crops(
        &source.annotated,
        &source.store,
        &in_classes,
        &config.data.synth.ood_class_ids(),
        &crop_options,
    )?;

    for d in [&half_a, &half_b, &test, &source] {
        d.store.write_all(&files.images())?;
    }
    save_manifest(&full, &files.full())?;
    save_manifest(&merged, &files.merged())?;
    save_manifest(&test.detection, &files.test())?;
    save_manifest(&source.annotated, &files.proxy_source())?;
    save_crops(&crops, &files.crops())?;

    let mut crop_labels = vec![0usize; crops.num_classes + 1];
    for c in &crops.crops {
        crop_labels[c.label as usize - 1] += 1;
    }
    let summary = SynthSummary {
        missing_rate: rate,
        merged_images: merged.records.len(),
        merged_annotations: merged.num_annotations(),
        full_annotations: full.num_annotations(),
        test_images: test.detection.records.len(),
        proxy_crops: crops.crops.len(),
        crop_labels,
    };
    write_json(&files.summary(), &summary)?;
    Ok(summary)
}

/// Generates the two halves, strips and merges them, and writes the merged,
/// fully labelled, test and proxy-source manifests plus the proxy crops.
pub fn cmd_synth(config: &RunConfig) -> Result<SynthSummary> {
    config.validate()?;
    staged(config.out_dir()?, config, |dir| build_data(config, dir))
}

fn proxy_config(config: &RunConfig) -> Result<crate::proxy::ProxyConfig> {
    Ok(crate::proxy::ProxyConfig {
        seed: derive_seed(config.seed()?, stream::RUN_PROXY, 0),
        ..config.proxy.clone()
    })
}

fn build_proxy(config: &RunConfig, data: &DataFiles, dir: &Path) -> Result<ProxyTrainLog> {
    let crops = load_crops(&data.crops())?;
    if crops.num_classes != config.proxy.num_classes {
        return Err(Error::Config(format!(
            "crop set has {} classes, proxy config {}",
            crops.num_classes, config.proxy.num_classes
        )));
    }
    let (model, log) = train_proxy(&crops, &proxy_config(config)?)?;
    ProxyCheckpoint::new(model, log.clone()).save(&dir.join("proxy.json"))?;
    write_json(&dir.join("log.json"), &log)?;
    Ok(log)
}

/// Trains the proxy classifier on the crops written by `synth`.
pub fn cmd_train_proxy(config: &RunConfig) -> Result<ProxyTrainLog> {
    config.validate()?;
    let data = DataFiles::new(require_path(&config.paths.data, "data directory")?);
    staged(config.out_dir()?, config, |dir| build_proxy(config, &data, dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub epochs: usize,
    pub metrics: Vec<EpochMetrics>,
}

fn train_manifest(data: &DataFiles, mode: Mode) -> Result<(DatasetManifest, Vec<Patch>)> {
    let path = match mode {
        Mode::Upper => data.full(),
        Mode::Baseline | Mode::Ours => data.merged(),
    };
    let manifest = load_manifest(&path)?;
    manifest.require_records("training")?;
    let images = load_images(&manifest, &data.store())?;
    Ok((manifest, images))
}

fn train_one(
    train: &TrainConfig,
    manifest: &DatasetManifest,
    images: &[Patch],
    proxy: Option<&dyn Proxy>,
    resume: Option<DetectorCheckpoint>,
    dir: &Path,
) -> Result<TrainSummary> {
    let outcome = run_training(manifest, images, train, proxy, resume, Some(dir))?;
    Ok(TrainSummary {
        mode: train.mode,
        epochs: outcome.checkpoint.epoch,
        metrics: outcome.metrics,
    })
}

/// Trains one detector arm. The proxy checkpoint is opened only in mode `ours`.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let mode = config.train.mode;
    let data = DataFiles::new(require_path(&config.paths.data, "data directory")?);
    let proxy_path = match mode {
        Mode::Ours => Some(require_path(&config.paths.proxy, "proxy checkpoint (required by mode ours)")?),
        _ => None,
    };
    let resume_path = match &config.paths.resume {
        Some(_) => Some(require_path(&config.paths.resume, "resume checkpoint")?),
        None => None,
    };
    let train = TrainConfig {
        seed: train_seed(config, 0)?,
        ..config.train.clone()
    };
    let (manifest, images) = train_manifest(&data, mode)?;
    let proxy = proxy_path.map(ProxyCheckpoint::load).transpose()?;
    let resume = resume_path.map(DetectorCheckpoint::load).transpose()?;
    staged(config.out_dir()?, config, |dir| {
        train_one(
            &train,
            &manifest,
            &images,
            proxy.as_ref().map(|p| &p.model as &dyn Proxy),
            resume,
            dir,
        )
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub reports: Vec<(String, EvalReport)>,
    pub comparison: Comparison,
}

fn column_name(ck: &DetectorCheckpoint, path: &Path, taken: &[String]) -> String {
    let base = if ck.tag.is_empty() {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        ck.tag.clone()
    };
    let mut name = base.clone();
    let mut i = 2;
    while taken.contains(&name) {
        name = format!("{base}-{i}");
        i += 1;
    }
    name
}

fn write_comparison(dir: &Path, summary: &EvaluateSummary) -> Result<()> {
    write_json(&dir.join("report.json"), summary)?;
    let table = dir.join("table.txt");
    fs::write(&table, summary.comparison.render_text()).map_err(|e| Error::io(&table, e))
}

/// Scores every checkpoint on the test manifest; one table column per checkpoint.
pub fn cmd_evaluate(config: &RunConfig) -> Result<EvaluateSummary> {
    config.validate()?;
    let data = DataFiles::new(require_path(&config.paths.data, "data directory")?);
    if config.paths.checkpoints.is_empty() {
        return Err(Error::Config("evaluate needs at least one checkpoint".into()));
    }
    for p in &config.paths.checkpoints {
        if !p.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
        }
    }
    let test = load_manifest(&data.test())?;
    let images = load_images(&test, &data.store())?;
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for p in &config.paths.checkpoints {
        let ck = DetectorCheckpoint::load(p)?;
        let taken: Vec<String> = reports.iter().map(|(n, _)| n.clone()).collect();
        let name = column_name(&ck, p, &taken);
        let report = evaluate(&ck.model, &test, &images, &config.evaluate, &name)?;
        reports.push((name, report));
    }
    let summary = EvaluateSummary {
        comparison: compare(&reports)?,
        reports,
    };
    staged(config.out_dir()?, config, |dir| write_comparison(dir, &summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectSummary {
    pub pseudo_labels: usize,
    pub overlays: Vec<PathBuf>,
}

fn audit_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Renders pseudo-label boxes (violet) and ground-truth boxes (green) over
/// the training images named in an audit dump. One overlay per epoch and image.
pub fn cmd_inspect_pseudo(config: &RunConfig) -> Result<InspectSummary> {
    config.validate()?;
    if config.inspect.scale == 0 {
        return Err(Error::Config("inspect.scale must be positive".into()));
    }
    let audit = require_path(&config.paths.audit, "audit dump")?;
    let data = DataFiles::new(require_path(&config.paths.data, "data directory")?);
    let mut records: Vec<AuditRecord> = Vec::new();
    for f in audit_files(audit)? {
        records.extend(read_audit(&f)?);
    }
    let manifest = load_manifest(&data.merged())?;
    let by_id: HashMap<&str, _> = manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut groups: Vec<((usize, String), Vec<&AuditRecord>)> = Vec::new();
    for r in &records {
        let key = (r.epoch, r.image.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    groups.truncate(config.inspect.limit);
    let store = data.store();
    staged(config.out_dir()?, config, |dir| {
        let mut overlays = Vec::new();
        for ((epoch, image), recs) in &groups {
            let rec = by_id
                .get(image.as_str())
                .ok_or_else(|| Error::Dataset(format!("audit names unknown image {image}")))?;
            let img = store.load(&rec.path)?;
            let pseudo: Vec<_> = recs.iter().map(|r| r.bbox).collect();
            let gts: Vec<_> = rec.annotations.iter().map(|a| a.bbox).collect();
            let out = draw_overlay(&img, &pseudo, &gts, config.inspect.scale);
            let name = format!("e{epoch:03}_{}.png", image.replace(['/', ':'], "_"));
            let dest = dir.join(&name);
            out.save(&dest).map_err(|source| Error::Image {
                path: dest.clone(),
                source,
            })?;
            overlays.push(PathBuf::from(name));
        }
        Ok(InspectSummary {
            pseudo_labels: records.len(),
            overlays,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub mode: Mode,
    pub run: usize,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceOutcome {
    pub data: SynthSummary,
    pub proxy_holdout_accuracy: Option<f64>,
    pub runs: Vec<ArmRun>,
    /// Columns `baseline`, `ours`, `upper`, each averaged over runs.
    pub comparison: Comparison,
    /// Mean-AP differences in points.
    pub gain: f64,
    pub upper_gap: f64,
    pub passed: bool,
}

/// Worker threads for the independent detector runs.
fn jobs(config: &RunConfig, tasks: usize) -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    config.reproduce.jobs.unwrap_or(avail).clamp(1, tasks.max(1))
}

fn reproduce_in(config: &RunConfig, dir: &Path) -> Result<ReproduceOutcome> {
    let t0 = Instant::now();
    let data_dir = dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let data = build_data(config, &data_dir)?;
    let files = DataFiles::new(&data_dir);
    log::info!("data ready (missing rate {:.3}) after {:.1}s", data.missing_rate, t0.elapsed().as_secs_f64());

    let proxy_dir = dir.join("proxy");
    fs::create_dir_all(&proxy_dir).map_err(|e| Error::io(&proxy_dir, e))?;
    let log = build_proxy(config, &files, &proxy_dir)?;
    let proxy = ProxyCheckpoint::load(&proxy_dir.join("proxy.json"))?.model;
    log::info!(
        "proxy held-out accuracy {:?} after {:.1}s",
        log.holdout_accuracy,
        t0.elapsed().as_secs_f64()
    );

    let test = load_manifest(&files.test())?;
    let test_images = load_images(&test, &files.store())?;
    let merged = train_manifest(&files, Mode::Baseline)?;
    let full = train_manifest(&files, Mode::Upper)?;

    let mut tasks = Vec::new();
    for mode in Mode::ALL {
        for run in 0..config.reproduce.runs {
            tasks.push((mode, run));
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ArmRun>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(mode, run)) = tasks.get(i) else { break };
        let res = (|| {
            let seed = train_seed(config, run)?;
            let train = TrainConfig {
                mode,
                seed,
                ..config.train.clone()
            };
            let (manifest, images) = if mode == Mode::Upper { &full } else { &merged };
            let run_dir = dir.join("runs").join(format!("{mode}-{run}"));
            let p = (mode == Mode::Ours).then_some(&proxy as &dyn Proxy);
            let outcome = run_training(manifest, images, &train, p, None, Some(&run_dir))?;
            let report = evaluate(&outcome.checkpoint.model, &test, &test_images, &config.evaluate, mode.name())?;
            log::info!("{mode} run {run}: mAP {:.2}", report.map * 100.0);
            write_json(&run_dir.join("eval.json"), &report)?;
            Ok(ArmRun {
                mode,
                run,
                seed,
                report,
            })
        })();
        results.lock().expect("results lock")[i] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs(config, tasks.len()) {
            s.spawn(work);
        }
    });
    let runs = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect::<Result<Vec<ArmRun>>>()?;

    let mut arms = Vec::new();
    for mode in Mode::ALL {
        let reports: Vec<EvalReport> = runs.iter().filter(|r| r.mode == mode).map(|r| r.report.clone()).collect();
        arms.push((mode.name().to_string(), mean_report(&reports, mode.name())?));
    }
    let comparison = compare(&arms)?;
    let mean = |m: Mode| comparison.mean_of(m.name()).unwrap_or(0.0);
    let gain = mean(Mode::Ours) - mean(Mode::Baseline);
    let upper_gap = mean(Mode::Upper) - mean(Mode::Ours);
    let outcome = ReproduceOutcome {
        data,
        proxy_holdout_accuracy: log.holdout_accuracy,
        comparison,
        gain,
        upper_gap,
        passed: gain >= config.reproduce.min_gain && upper_gap >= -config.reproduce.slack,
        runs,
    };
    write_json(&dir.join("comparison.json"), &outcome.comparison)?;
    write_json(&dir.join("outcome.json"), &outcome)?;
    let table = dir.join("table.txt");
    let text = format!(
        "{}\nours - baseline: {:+.2}  upper - ours: {:+.2}  ordering: {}\n",
        outcome.comparison.render_text(),
        gain,
        upper_gap,
        if outcome.passed { "PASS" } else { "FAIL" }
    );
    fs::write(&table, text).map_err(|e| Error::io(&table, e))?;
    let wall = dir.join("wall_time.json");
    write_json(&wall, &serde_json::json!({"seconds": t0.elapsed().as_secs_f64()}))?;
    Ok(outcome)
}

/// Runs the whole experiment: data, proxy, every arm for every run seed,
/// evaluation and the three-column comparison. The ordering verdict is in
/// the returned outcome; callers decide how to report a failed ordering.
pub fn cmd_reproduce(config: &RunConfig) -> Result<ReproduceOutcome> {
    config.validate()?;
    if config.reproduce.runs == 0 {
        return Err(Error::Config("reproduce.runs must be positive".into()));
    }
    staged(config.out_dir()?, config, |dir| reproduce_in(config, dir))
}
