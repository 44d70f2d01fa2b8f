//! The `(K + 1)`-way rejection classifier: aspect clusters, padding,
//! spatial pyramid pooling, patch-drop ensembles and training.

mod clusters;
mod network;
mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SgdConfig;
use crate::patch::Patch;
use crate::rng::Rng;

pub use clusters::{fit_aspect_clusters, AspectCenters};
pub use network::{
    plan_batches, train_proxy, ProxyCheckpoint, ProxyEpoch, ProxyNet, ProxyTrainLog, PROXY_SCHEMA,
};
pub use ops::{pad_to, pad_to_nearest, patch_drop, patch_drop_at, spp_backward, spp_len, spp_pool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    /// Classes of interest `K`; the network has `K + 1` outputs.
    pub num_classes: usize,
    /// Pyramid grid subdivisions.
    pub levels: Vec<usize>,
    /// Aspect clusters `k_c`.
    pub clusters: usize,
    /// Channels of the stride-1 stem and the stride-2 stage.
    pub widths: Vec<usize>,
    /// Residual blocks after the stride-2 stage.
    pub residual_blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Fraction of crops held out for accuracy reporting.
    pub holdout: f64,
    /// Train even when no rejection-class crops exist.
    pub allow_missing_reject: bool,
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            levels: vec![1, 2, 4],
            clusters: 5,
            widths: vec![16, 32],
            residual_blocks: 1,
            epochs: 12,
            batch_size: 32,
            optimizer: SgdConfig {
                lr: 0.02,
                milestones: vec![8],
                ..Default::default()
            },
            holdout: 0.1,
            allow_missing_reject: false,
            seed: 0,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("proxy: {m}")));
        if self.num_classes < 2 {
            return bad("need at least two classes");
        }
        if self.levels.is_empty() || self.levels.contains(&0) {
            return bad("pyramid levels must be non-empty and positive");
        }
        if self.clusters == 0 {
            return bad("need at least one aspect cluster");
        }
        if self.widths.len() != 2 || self.widths.contains(&0) {
            return bad("widths must hold two positive channel counts");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Smallest input side whose feature map still covers the finest pyramid level.
    pub fn min_side(&self) -> usize {
        2 * self.levels.iter().copied().max().unwrap_or(1)
    }
}

/// Probabilities over `K + 1` classes; the last entry is the rejection class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyPrediction {
    pub probs: Vec<f64>,
}

impl ProxyPrediction {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    /// Zero-based index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Index of the rejection class (zero-based).
    pub fn reject_index(&self) -> usize {
        self.probs.len() - 1
    }

    /// Largest probability among the classes of interest.
    pub fn max_of_interest(&self) -> f64 {
        self.probs[..self.reject_index()]
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Anything that maps shape-homogeneous crops to `K + 1` probabilities.
pub trait Proxy {
    fn num_outputs(&self) -> usize;
    fn centers(&self) -> &AspectCenters;
    /// One prediction per crop, in order. All crops must share one size.
    fn predict(&self, batch: &[&Patch]) -> Result<Vec<ProxyPrediction>>;
}

pub(crate) fn check_homogeneous(batch: &[&Patch]) -> Result<(usize, usize)> {
    let Some(first) = batch.first() else {
        return Err(Error::Shape("empty proxy batch".into()));
    };
    let size = first.size();
    if let Some(p) = batch.iter().find(|p| p.size() != size) {
        return Err(Error::Shape(format!(
            "heterogeneous proxy batch: {:?} and {:?}",
            size,
            p.size()
        )));
    }
    Ok(size)
}

/// Mean of the proxy prediction on `crop` and on `m` patch-drop variants of it.
/// Returns the mean and the `m + 1` member predictions (original first).
pub fn ensemble_predict_members<P: Proxy + ?Sized>(
    model: &P,
    crop: &Patch,
    m: usize,
    s: usize,
    rng: &mut Rng,
) -> Result<(ProxyPrediction, Vec<ProxyPrediction>)> {
    let variants: Vec<Patch> = (0..m).map(|_| patch_drop(crop, s, rng).0).collect();
    let mut batch: Vec<&Patch> = Vec::with_capacity(m + 1);
    batch.push(crop);
    batch.extend(variants.iter());
    let members = model.predict(&batch)?;
    let mut sum = vec![0.0; model.num_outputs()];
    for p in &members {
        for (acc, v) in sum.iter_mut().zip(&p.probs) {
            *acc += v;
        }
    }
    let mean = sum.into_iter().map(|v| v / (m + 1) as f64).collect();
    Ok((ProxyPrediction::new(mean), members))
}

pub fn ensemble_predict<P: Proxy + ?Sized>(
    model: &P,
    crop: &Patch,
    m: usize,
    s: usize,
    rng: &mut Rng,
) -> Result<ProxyPrediction> {
    Ok(ensemble_predict_members(model, crop, m, s, rng)?.0)
}
