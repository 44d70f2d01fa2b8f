use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorOutput, RawOutput};
use crate::error::{Error, Result};
use crate::nn::{Block, Conv2d, ConvNet, NetCache, Sgd, Tensor};
use crate::patch::{Patch, CHANNELS};
use crate::rng::{rng_for, stream};

pub const DETECTOR_SCHEMA: &str = "mergetrain-detector-v1";

/// Convolutional backbone (stride-2 stages, extra stride-1 convolutions) and a
/// pointwise head with `A * (5 + K)` output channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorNet {
    pub config: DetectorConfig,
    pub net: ConvNet,
}

impl DetectorNet {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, stream::DETECTOR_INIT, 0);
        let mut blocks = Vec::new();
        let mut cin = CHANNELS;
        for &w in &config.widths {
            blocks.push(Block::Conv {
                conv: Conv2d::new(cin, w, 3, 2, 1, &mut rng),
                activate: true,
            });
            cin = w;
        }
        for _ in 0..config.extra_convs {
            blocks.push(Block::Conv {
                conv: Conv2d::new(cin, cin, 3, 1, 1, &mut rng),
                activate: true,
            });
        }
        let stride = config.values_per_anchor();
        let mut head = Conv2d::new(cin, config.num_anchors() * stride, 1, 1, 0, &mut rng);
        // small head weights keep the initial boxes near the anchors
        for w in &mut head.weight {
            *w *= 0.1;
        }
        for a in 0..config.num_anchors() {
            head.bias[a * stride + 4] = config.obj_bias_init as f32;
        }
        blocks.push(Block::Conv {
            conv: head,
            activate: false,
        });
        Ok(Self {
            config,
            net: ConvNet { blocks },
        })
    }

    pub fn batch(&self, images: &[&Patch]) -> Result<Tensor> {
        let s = self.config.input_size;
        if images.is_empty() {
            return Err(Error::Shape("empty detector batch".into()));
        }
        if let Some(p) = images.iter().find(|p| p.size() != (s, s)) {
            let (w, h) = p.size();
            return Err(Error::Shape(format!(
                "detector input is {w}x{h}, expected {s}x{s}"
            )));
        }
        Ok(Tensor::from_patches(images))
    }

    fn split(&self, y: &Tensor) -> Vec<RawOutput> {
        let cfg = &self.config;
        let (g, na, stride) = (cfg.grid, cfg.num_anchors(), cfg.values_per_anchor());
        debug_assert_eq!(y.shape(), [na * stride, y.n, g, g]);
        (0..y.n)
            .map(|n| {
                let mut raw = RawOutput::zeros(cfg);
                for i in 0..g {
                    for j in 0..g {
                        for a in 0..na {
                            let base = ((i * g + j) * na + a) * stride;
                            for v in 0..stride {
                                raw.data[base + v] = y.data[y.index(a * stride + v, n, i, j)] as f64;
                            }
                        }
                    }
                }
                raw
            })
            .collect()
    }

    pub fn forward_raw(&self, images: &[&Patch]) -> Result<Vec<RawOutput>> {
        let x = self.batch(images)?;
        Ok(self.split(&self.net.forward(&x)))
    }

    pub fn forward(&self, images: &[&Patch]) -> Result<Vec<DetectorOutput>> {
        Ok(self
            .forward_raw(images)?
            .iter()
            .map(DetectorOutput::from_raw)
            .collect())
    }

    pub fn forward_train(&self, images: &[&Patch]) -> Result<(Vec<RawOutput>, NetCache)> {
        let x = self.batch(images)?;
        let (y, cache) = self.net.forward_train(&x);
        Ok((self.split(&y), cache))
    }

    /// Backpropagates per-image gradients with respect to the raw outputs.
    pub fn backward(&self, cache: NetCache, grads: &[Vec<f64>]) -> Vec<Vec<f32>> {
        let cfg = &self.config;
        let (g, na, stride) = (cfg.grid, cfg.num_anchors(), cfg.values_per_anchor());
        let mut dy = Tensor::zeros(na * stride, grads.len(), g, g);
        for (n, grad) in grads.iter().enumerate() {
            for i in 0..g {
                for j in 0..g {
                    for a in 0..na {
                        let base = ((i * g + j) * na + a) * stride;
                        for v in 0..stride {
                            let at = dy.index(a * stride + v, n, i, j);
                            dy.data[at] = grad[base + v] as f32;
                        }
                    }
                }
            }
        }
        self.net.backward(cache, dy)
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.net.params_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.net.blocks.iter().all(|b| match b {
            Block::Conv { conv, .. } => conv.weight.iter().chain(&conv.bias).all(|v| v.is_finite()),
            Block::Residual { a, b } => a
                .weight
                .iter()
                .chain(&a.bias)
                .chain(&b.weight)
                .chain(&b.bias)
                .all(|v| v.is_finite()),
        })
    }
}

/// Serialized detector with the optimizer state needed to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCheckpoint {
    pub schema: String,
    /// Number of completed training epochs.
    pub epoch: usize,
    pub model: DetectorNet,
    #[serde(default)]
    pub optimizer: Option<Sgd>,
    /// Training mode and other free-form labels.
    #[serde(default)]
    pub tag: String,
}

impl DetectorCheckpoint {
    pub fn new(model: DetectorNet, epoch: usize, optimizer: Option<Sgd>, tag: impl Into<String>) -> Self {
        Self {
            schema: DETECTOR_SCHEMA.into(),
            epoch,
            model,
            optimizer,
            tag: tag.into(),
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
        if ck.schema != DETECTOR_SCHEMA {
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

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DetectorConfig {
        DetectorConfig {
            input_size: 16,
            grid: 4,
            num_classes: 3,
            widths: vec![4, 6],
            extra_convs: 1,
            ..Default::default()
        }
    }

    fn image(seed: usize, size: usize) -> Patch {
        let mut p = Patch::zeros(size, size);
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = ((i * 31 + seed * 7) % 17) as f32 / 17.0;
        }
        p
    }

    #[test]
    fn output_shape_and_determinism() {
        let net = DetectorNet::new(tiny(), 3).unwrap();
        let a = image(1, 16);
        let b = image(2, 16);
        let out = net.forward(&[&a, &b]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].shape(), [4, 4, 2, 8]);
        let again = net.forward(&[&a]).unwrap();
        assert_eq!(again[0], out[0]);
        for p in &out[1].preds {
            assert!((p.p_cls.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let net = DetectorNet::new(tiny(), 3).unwrap();
        let bad = image(0, 20);
        assert!(matches!(net.forward(&[&bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_matches_finite_differences_through_head() {
        let mut net = DetectorNet::new(tiny(), 5).unwrap();
        let img = image(3, 16);
        let weights: Vec<f64> = (0..4 * 4 * 2 * 8).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let objective = |n: &DetectorNet| -> f64 {
            let raw = n.forward_raw(&[&img]).unwrap();
            raw[0].data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward_train(&[&img]).unwrap();
        let grads = net.backward(cache, &[weights.clone()]);
        let head = grads.len() - 2;
        let eps = 1e-2f32;
        for k in [0usize, 5, 17] {
            let orig = net.params_mut()[head][k];
            net.params_mut()[head][k] = orig + eps;
            let up = objective(&net);
            net.params_mut()[head][k] = orig - eps;
            let down = objective(&net);
            net.params_mut()[head][k] = orig;
            let numeric = (up - down) / (2.0 * eps as f64);
            let analytic = grads[head][k] as f64;
            assert!((numeric - analytic).abs() <= 1e-2 * (1.0 + analytic.abs()), "{numeric} vs {analytic}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.json");
        let net = DetectorNet::new(tiny(), 9).unwrap();
        DetectorCheckpoint::new(net.clone(), 2, None, "baseline").save(&path).unwrap();
        let back = DetectorCheckpoint::load(&path).unwrap();
        assert_eq!(back.model, net);
        assert_eq!(back.epoch, 2);
        let img = image(1, 16);
        assert_eq!(back.model.forward(&[&img]).unwrap(), net.forward(&[&img]).unwrap());
    }
}
