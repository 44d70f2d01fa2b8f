//! End-to-end commands: benchmark synthesis, proxy training, detector
//! training, evaluation, pseudo-label overlays and the full three-arm
//! reproduction. Every command validates its configuration first and writes
//! into a staging directory that is renamed into place on success.

mod commands;
mod overlay;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{ClassId, CropOptions, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::proxy::ProxyConfig;
use crate::training::TrainConfig;

pub use commands::{
    cmd_evaluate, cmd_inspect_pseudo, cmd_reproduce, cmd_synth, cmd_train, cmd_train_proxy, DataFiles,
    EvaluateSummary, InspectSummary, ReproduceOutcome, SynthSummary, TrainSummary,
};
pub use overlay::{draw_overlay, overlay_rect, GT_COLOR, PSEUDO_COLOR};

/// Construction of the merged benchmark from one shape generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generator settings shared by every split; seeds and prefixes are set per split.
    pub synth: SynthConfig,
    /// Images generated for each of the two halves before stripping.
    pub half_images: usize,
    pub test_images: usize,
    /// Images of the separately generated, fully annotated proxy source set.
    pub proxy_images: usize,
    /// Classes labelled in the first half; the second half keeps the rest.
    pub split_a: Vec<ClassId>,
    pub crops: CropOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            half_images: 850,
            test_images: 300,
            proxy_images: 600,
            split_a: vec![1, 2, 3],
            crops: CropOptions {
                jitter_copies: 1,
                background_per_image: 1,
                ..Default::default()
            },
        }
    }
}

impl DataConfig {
    pub fn class_sets(&self) -> (BTreeSet<ClassId>, BTreeSet<ClassId>) {
        let a: BTreeSet<ClassId> = self.split_a.iter().copied().collect();
        let all: BTreeSet<ClassId> = (1..=self.synth.num_classes() as ClassId).collect();
        let b = all.difference(&a).copied().collect();
        (a, b)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let (a, b) = self.class_sets();
        if a.is_empty() || b.is_empty() || a.len() != self.split_a.len() {
            return Err(Error::Config("data: split_a must be a proper, duplicate-free subset of the classes".into()));
        }
        if a.iter().any(|&c| c == 0 || c as usize > self.synth.num_classes()) {
            return Err(Error::Config("data: split_a references unknown classes".into()));
        }
        if self.half_images == 0 || self.test_images == 0 || self.proxy_images == 0 {
            return Err(Error::Config("data: image counts must be positive".into()));
        }
        Ok(())
    }
}

/// Files consumed by the individual commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Output directory of `synth`.
    pub data: Option<PathBuf>,
    /// Proxy checkpoint for `train --mode ours`.
    pub proxy: Option<PathBuf>,
    /// Detector checkpoint to resume from.
    pub resume: Option<PathBuf>,
    /// Detector checkpoints for `evaluate`.
    pub checkpoints: Vec<PathBuf>,
    /// Audit dump (file or directory) for `inspect-pseudo`.
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceConfig {
    /// Training runs per arm; run `i` uses a seed derived from the run seed and `i`.
    pub runs: usize,
    /// Required mean-AP gain of `ours` over `baseline`, in points.
    pub min_gain: f64,
    /// Tolerated shortfall of `upper` below `ours`, in points.
    pub slack: f64,
    /// Concurrent training runs; all available cores when unset.
    pub jobs: Option<usize>,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            runs: 3,
            min_gain: 2.0,
            slack: 1.0,
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectConfig {
    /// Upscaling factor of the rendered overlays.
    pub scale: u32,
    /// Maximum number of images rendered.
    pub limit: usize,
}

impl Default for InspectConfig {
    fn default() -> Self {
        Self { scale: 4, limit: 200 }
    }
}

/// Contents of the configuration file; one section per command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub proxy: ProxyConfig,
    pub train: TrainConfig,
    pub evaluate: EvalConfig,
    pub reproduce: ReproduceConfig,
    pub inspect: InspectConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("an output directory is required (config `out` or --out)".into()))
    }

    /// Checks the sections every command depends on.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.out_dir()?;
        self.data.validate()?;
        self.proxy.validate()?;
        self.train.validate()?;
        let k = self.data.synth.num_classes();
        if self.train.detector.num_classes != k || self.proxy.num_classes != k {
            return Err(Error::Config(format!(
                "class counts disagree: data {k}, detector {}, proxy {}",
                self.train.detector.num_classes, self.proxy.num_classes
            )));
        }
        if self.data.synth.canvas as usize != self.train.detector.input_size {
            return Err(Error::Config(format!(
                "canvas {} differs from the detector input size {}",
                self.data.synth.canvas, self.train.detector.input_size
            )));
        }
        Ok(())
    }
}

pub(crate) fn require_path<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing path: {what}")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

const CONFIG_ECHO: &str = "effective_config.toml";

/// Runs `body` against a fresh staging directory next to `out`, echoes the
/// effective config into it and renames it to `out` on success. An existing
/// `out` is replaced only when it holds an earlier command's output.
pub(crate) fn staged<T>(out: &Path, config: &RunConfig, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if out.exists() {
        let empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_none();
        if !empty && !out.join(CONFIG_ECHO).exists() {
            return Err(Error::Config(format!(
                "output directory {} exists and was not written by this tool",
                out.display()
            )));
        }
    }
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad output directory {}", out.display())))?
        .to_string_lossy()
        .into_owned();
    let staging = out.with_file_name(format!(".{name}.staging"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let echo = staging.join(CONFIG_ECHO);
    fs::write(&echo, config.to_toml()?).map_err(|e| Error::io(&echo, e))?;
    match body(&staging) {
        Ok(v) => {
            if out.exists() {
                fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
            }
            fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}
