use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    check_homogeneous, fit_aspect_clusters, pad_to, spp_backward, spp_len, spp_pool, AspectCenters,
    Proxy, ProxyConfig, ProxyPrediction,
};
use crate::datasets::CropSet;
use crate::error::{Error, Result};
use crate::nn::{grad_norm, Block, Conv2d, ConvNet, Linear, Sgd, Tensor};
use crate::patch::{Patch, CHANNELS};
use crate::rng::{rng_for, stream, Rng};

pub const PROXY_SCHEMA: &str = "mergetrain-proxy-v1";

/// Convolutional stem, a stride-2 stage, residual blocks, spatial pyramid
/// pooling and a linear layer to `K + 1` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyNet {
    pub config: ProxyConfig,
    pub features: ConvNet,
    pub fc: Linear,
    pub centers: AspectCenters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProxyTrainLog {
    pub epochs: Vec<ProxyEpoch>,
    pub train_size: usize,
    pub holdout_size: usize,
    pub holdout_accuracy: Option<f64>,
    /// Held-out accuracy per class `1..=K+1`; `None` for classes absent from the holdout.
    pub per_class_accuracy: Vec<Option<f64>>,
}

fn softmax32(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| (z as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl ProxyNet {
    pub fn new(config: ProxyConfig, centers: AspectCenters) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, stream::PROXY_INIT, 0);
        let (w0, w1) = (config.widths[0], config.widths[1]);
        let mut blocks = vec![
            Block::Conv {
                conv: Conv2d::new(CHANNELS, w0, 3, 1, 1, &mut rng),
                activate: true,
            },
            Block::Conv {
                conv: Conv2d::new(w0, w1, 3, 2, 1, &mut rng),
                activate: true,
            },
        ];
        for _ in 0..config.residual_blocks {
            let a = Conv2d::new(w1, w1, 3, 1, 1, &mut rng);
            let mut b = Conv2d::new(w1, w1, 3, 1, 1, &mut rng);
            for v in &mut b.weight {
                *v *= 0.5;
            }
            blocks.push(Block::Residual { a, b });
        }
        let fc = Linear::new(spp_len(w1, &config.levels), config.num_classes + 1, &mut rng);
        Ok(Self {
            config,
            features: ConvNet { blocks },
            fc,
            centers,
        })
    }

    fn input(&self, batch: &[&Patch]) -> Result<Tensor> {
        let (w, h) = check_homogeneous(batch)?;
        let min = self.config.min_side();
        if w >= min && h >= min {
            return Ok(Tensor::from_patches(batch));
        }
        let padded: Vec<Patch> = batch.iter().map(|p| pad_to(p, w.max(min), h.max(min))).collect();
        let refs: Vec<&Patch> = padded.iter().collect();
        Ok(Tensor::from_patches(&refs))
    }

    pub fn logits(&self, batch: &[&Patch]) -> Result<Vec<f32>> {
        let x = self.input(batch)?;
        let feat = self.features.forward(&x);
        let (pooled, _) = spp_pool(&feat, &self.config.levels);
        Ok(self.fc.forward(&pooled, batch.len()))
    }

    /// One SGD step of mean cross-entropy on a shape-homogeneous batch with
    /// zero-based labels. Returns `(loss sum, correct count)`.
    fn train_batch(&mut self, batch: &[&Patch], labels: &[usize], opt: &mut Sgd, epoch: usize) -> Result<(f64, usize)> {
        let n = batch.len();
        let k1 = self.config.num_classes + 1;
        let x = self.input(batch)?;
        let (feat, cache) = self.features.forward_train(&x);
        let (pooled, arg) = spp_pool(&feat, &self.config.levels);
        let logits = self.fc.forward(&pooled, n);
        let mut loss = 0.0;
        let mut correct = 0;
        let mut dlogits = vec![0.0f32; n * k1];
        for (i, &y) in labels.iter().enumerate() {
            let p = softmax32(&logits[i * k1..(i + 1) * k1]);
            loss -= p[y].max(1e-12).ln();
            let pred = ProxyPrediction::new(p.clone()).argmax();
            correct += usize::from(pred == y);
            for (j, pj) in p.iter().enumerate() {
                let t = if j == y { 1.0 } else { 0.0 };
                dlogits[i * k1 + j] = ((pj - t) / n as f64) as f32;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("proxy loss at epoch {epoch}")));
        }
        let (dpooled, dw, db) = self.fc.backward(&pooled, n, &dlogits);
        let dfeat = spp_backward(feat.shape(), &arg, &dpooled);
        let mut grads = self.features.backward(cache, dfeat);
        grads.push(dw);
        grads.push(db);
        debug_assert!(grad_norm(&grads).is_finite());
        let mut params = self.features.params_mut();
        params.push(&mut self.fc.weight);
        params.push(&mut self.fc.bias);
        opt.step(params, &grads, epoch);
        Ok((loss, correct))
    }
}

impl Proxy for ProxyNet {
    fn num_outputs(&self) -> usize {
        self.config.num_classes + 1
    }

    fn centers(&self) -> &AspectCenters {
        &self.centers
    }

    fn predict(&self, batch: &[&Patch]) -> Result<Vec<ProxyPrediction>> {
        let k1 = self.num_outputs();
        let logits = self.logits(batch)?;
        Ok(logits
            .chunks(k1)
            .map(|l| ProxyPrediction::new(softmax32(l)))
            .collect())
    }
}

/// Groups crops by padded size, so every batch is shape-homogeneous, then
/// splits groups into batches of at most `batch_size` and shuffles the batch
/// order.
pub fn plan_batches(
    sizes: &[(usize, usize)],
    centers: &AspectCenters,
    batch_size: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, &(w, h)) in sizes.iter().enumerate() {
        groups.entry(centers.padded_size(w, h)).or_default().push(i);
    }
    let mut batches = Vec::new();
    for mut members in groups.into_values() {
        members.shuffle(rng);
        batches.extend(members.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

fn padded_batch(crops: &CropSet, idx: &[usize], centers: &AspectCenters) -> Vec<Patch> {
    idx.iter()
        .map(|&i| {
            let p = &crops.crops[i].patch;
            let (w, h) = centers.padded_size(p.width, p.height);
            pad_to(p, w, h)
        })
        .collect()
}

fn holdout_accuracy(model: &ProxyNet, crops: &CropSet, idx: &[usize], log: &mut ProxyTrainLog) -> Result<()> {
    let k1 = model.num_outputs();
    let mut hits = vec![0usize; k1];
    let mut totals = vec![0usize; k1];
    let sizes: Vec<(usize, usize)> = idx.iter().map(|&i| crops.crops[i].patch.size()).collect();
    let mut rng = rng_for(0, stream::PROXY_SHUFFLE, u64::MAX);
    for batch in plan_batches(&sizes, &model.centers, 64, &mut rng) {
        let members: Vec<usize> = batch.iter().map(|&b| idx[b]).collect();
        let patches = padded_batch(crops, &members, &model.centers);
        let refs: Vec<&Patch> = patches.iter().collect();
        for (pred, &i) in model.predict(&refs)?.iter().zip(&members) {
            let y = crops.crops[i].label as usize - 1;
            totals[y] += 1;
            hits[y] += usize::from(pred.argmax() == y);
        }
    }
    let n: usize = totals.iter().sum();
    log.holdout_accuracy = (n > 0).then(|| hits.iter().sum::<usize>() as f64 / n as f64);
    log.per_class_accuracy = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    Ok(())
}

/// Trains the proxy on labelled crops. Aspect centers are fitted on the
/// training crop sizes and stored in the model.
pub fn train_proxy(crops: &CropSet, config: &ProxyConfig) -> Result<(ProxyNet, ProxyTrainLog)> {
    config.validate()?;
    let k = config.num_classes;
    if crops.num_classes != k {
        return Err(Error::Config(format!(
            "proxy expects {k} classes but the crop set has {}",
            crops.num_classes
        )));
    }
    if let Some(c) = crops.crops.iter().find(|c| c.label == 0 || c.label as usize > k + 1) {
        return Err(Error::Dataset(format!(
            "crop {} has label {} outside 1..={}",
            c.source,
            c.label,
            k + 1
        )));
    }
    if crops.crops.is_empty() {
        return Err(Error::Dataset("no proxy training crops".into()));
    }
    let has_reject = crops.crops.iter().any(|c| c.label as usize == k + 1);
    if !has_reject {
        log::warn!("no rejection-class crops: class {} would stay untrained", k + 1);
        if !config.allow_missing_reject {
            return Err(Error::Dataset(format!(
                "no crops labelled {} (rejection class); set allow_missing_reject to train anyway",
                k + 1
            )));
        }
    }

    let mut order: Vec<usize> = (0..crops.crops.len()).collect();
    order.shuffle(&mut rng_for(config.seed, stream::PROXY_SPLIT, 0));
    let n_hold = (order.len() as f64 * config.holdout).floor() as usize;
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();
    train.sort_unstable();

    let sizes: Vec<(usize, usize)> = train.iter().map(|&i| crops.crops[i].patch.size()).collect();
    let centers = fit_aspect_clusters(&sizes, config.clusters, config.seed)?;
    log::info!("proxy aspect centers: {:?}", centers.centers);
    let mut model = ProxyNet::new(config.clone(), centers)?;
    let mut opt = Sgd::new(config.optimizer.clone());
    let mut log = ProxyTrainLog {
        train_size: train.len(),
        holdout_size: hold.len(),
        ..Default::default()
    };

    for epoch in 0..config.epochs {
        let mut rng = rng_for(config.seed, stream::PROXY_SHUFFLE, epoch as u64);
        let batches = plan_batches(&sizes, &model.centers, config.batch_size, &mut rng);
        let (mut loss, mut correct) = (0.0, 0);
        for batch in &batches {
            let members: Vec<usize> = batch.iter().map(|&b| train[b]).collect();
            let patches = padded_batch(crops, &members, &model.centers);
            let refs: Vec<&Patch> = patches.iter().collect();
            let labels: Vec<usize> = members.iter().map(|&i| crops.crops[i].label as usize - 1).collect();
            let (l, c) = model.train_batch(&refs, &labels, &mut opt, epoch)?;
            loss += l;
            correct += c;
        }
        let e = ProxyEpoch {
            epoch,
            loss: loss / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
            batches: batches.len(),
        };
        log::info!("proxy epoch {epoch}: loss {:.4} acc {:.3}", e.loss, e.accuracy);
        log.epochs.push(e);
    }
    holdout_accuracy(&model, crops, hold, &mut log)?;
    if let Some(acc) = log.holdout_accuracy {
        log::info!("proxy held-out accuracy {acc:.3}");
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyCheckpoint {
    pub schema: String,
    pub model: ProxyNet,
    pub log: ProxyTrainLog,
}

impl ProxyCheckpoint {
    pub fn new(model: ProxyNet, log: ProxyTrainLog) -> Self {
        Self {
            schema: PROXY_SCHEMA.into(),
            model,
            log,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.schema != PROXY_SCHEMA {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported schema {:?}",
                path.display(),
                ck.schema
            )));
        }
        ck.model.config.validate()?;
        Ok(ck)
    }
}
