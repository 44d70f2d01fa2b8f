//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Activations use a channel-major batch layout `[C, N, H, W]`, so a
//! convolution is a single GEMM of the weight matrix against the im2col
//! matrix of the whole batch and its output is already in the same layout.

mod conv;
mod optim;

pub use conv::{Conv2d, ConvCache};
pub use optim::{Sgd, SgdConfig};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Batch of feature maps in `[C, N, H, W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    /// Stacks equally sized patches into a batch.
    pub fn from_patches(patches: &[&crate::patch::Patch]) -> Self {
        let (w, h) = patches[0].size();
        let mut t = Tensor::zeros(crate::patch::CHANNELS, patches.len(), h, w);
        let plane = h * w;
        for (n, p) in patches.iter().enumerate() {
            debug_assert_eq!(p.size(), (w, h));
            for c in 0..crate::patch::CHANNELS {
                let dst = t.index(c, n, 0, 0);
                t.data[dst..dst + plane].copy_from_slice(&p.data[c * plane..(c + 1) * plane]);
            }
        }
        t
    }
}

pub const LEAKY_SLOPE: f32 = 0.1;

pub fn leaky_relu_inplace(data: &mut [f32]) {
    for v in data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through a leaky ReLU given its output.
pub fn leaky_relu_backward(out: &[f32], grad: &mut [f32]) {
    for (g, &y) in grad.iter_mut().zip(out) {
        if y < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub(crate) fn he_normal(rng: &mut Rng, fan_in: usize, len: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| dist.sample(rng) as f32).collect()
}

/// One stage of a [`ConvNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Block {
    /// Convolution, optionally followed by a leaky ReLU.
    Conv { conv: Conv2d, activate: bool },
    /// `leaky(x + conv_b(leaky(conv_a(x))))`; both convolutions keep the shape.
    Residual { a: Conv2d, b: Conv2d },
}

enum BlockCache {
    Conv {
        input_shape: [usize; 4],
        cache: ConvCache,
        out: Option<Vec<f32>>,
    },
    Residual {
        shape: [usize; 4],
        cache_a: ConvCache,
        mid: Vec<f32>,
        cache_b: ConvCache,
        out: Vec<f32>,
    },
}

/// Activations kept by [`ConvNet::forward_train`] for the backward pass.
pub struct NetCache {
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub blocks: Vec<Block>,
}

impl ConvNet {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = match block {
                Block::Conv { conv, activate } => {
                    let mut y = conv.forward(&cur).0;
                    if *activate {
                        leaky_relu_inplace(&mut y.data);
                    }
                    y
                }
                Block::Residual { a, b } => {
                    let mut mid = a.forward(&cur).0;
                    leaky_relu_inplace(&mut mid.data);
                    let mut y = b.forward(&mid).0;
                    for (o, i) in y.data.iter_mut().zip(&cur.data) {
                        *o += *i;
                    }
                    leaky_relu_inplace(&mut y.data);
                    y
                }
            };
        }
        cur
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, NetCache) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = match block {
                Block::Conv { conv, activate } => {
                    let input_shape = cur.shape();
                    let (mut y, cache) = conv.forward(&cur);
                    let out = if *activate {
                        leaky_relu_inplace(&mut y.data);
                        Some(y.data.clone())
                    } else {
                        None
                    };
                    caches.push(BlockCache::Conv {
                        input_shape,
                        cache,
                        out,
                    });
                    y
                }
                Block::Residual { a, b } => {
                    let shape = cur.shape();
                    let (mut mid, cache_a) = a.forward(&cur);
                    leaky_relu_inplace(&mut mid.data);
                    let (mut y, cache_b) = b.forward(&mid);
                    for (o, i) in y.data.iter_mut().zip(&cur.data) {
                        *o += *i;
                    }
                    leaky_relu_inplace(&mut y.data);
                    caches.push(BlockCache::Residual {
                        shape,
                        cache_a,
                        mid: mid.data,
                        cache_b,
                        out: y.data.clone(),
                    });
                    y
                }
            };
        }
        (cur, NetCache { blocks: caches })
    }

    /// Backpropagates `grad_out`; returns parameter gradients in
    /// [`ConvNet::params_mut`] order.
    pub fn backward(&self, cache: NetCache, grad_out: Tensor) -> Vec<Vec<f32>> {
        let mut grads: Vec<Vec<f32>> = Vec::new();
        let mut g = grad_out;
        let n_blocks = self.blocks.len();
        for (idx, (block, bc)) in self.blocks.iter().zip(cache.blocks).enumerate().rev() {
            let need_input_grad = idx > 0;
            match (block, bc) {
                (
                    Block::Conv { conv, .. },
                    BlockCache::Conv {
                        input_shape,
                        cache,
                        out,
                    },
                ) => {
                    if let Some(out) = out {
                        leaky_relu_backward(&out, &mut g.data);
                    }
                    let (dx, dw, db) = conv.backward(&cache, input_shape, &g, need_input_grad);
                    grads.push(db);
                    grads.push(dw);
                    if let Some(dx) = dx {
                        g = dx;
                    }
                }
                (
                    Block::Residual { a, b },
                    BlockCache::Residual {
                        shape,
                        cache_a,
                        mid,
                        cache_b,
                        out,
                    },
                ) => {
                    leaky_relu_backward(&out, &mut g.data);
                    let skip = g.clone();
                    let (dmid, dwb, dbb) = b.backward(&cache_b, shape, &g, true);
                    let mut dmid = dmid.expect("input grad requested");
                    leaky_relu_backward(&mid, &mut dmid.data);
                    let (dx, dwa, dba) = a.backward(&cache_a, shape, &dmid, true);
                    let mut dx = dx.expect("input grad requested");
                    for (d, s) in dx.data.iter_mut().zip(&skip.data) {
                        *d += *s;
                    }
                    grads.push(dbb);
                    grads.push(dwb);
                    grads.push(dba);
                    grads.push(dwa);
                    g = dx;
                }
                _ => unreachable!("cache layout follows the block list"),
            }
        }
        debug_assert!(n_blocks == 0 || !grads.is_empty());
        grads.reverse();
        grads
    }

    /// Parameters in a fixed order: per block `(weight, bias)`, residual
    /// blocks as `(a.weight, a.bias, b.weight, b.bias)`.
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for block in &mut self.blocks {
            match block {
                Block::Conv { conv, .. } => {
                    out.push(&mut conv.weight);
                    out.push(&mut conv.bias);
                }
                Block::Residual { a, b } => {
                    out.push(&mut a.weight);
                    out.push(&mut a.bias);
                    out.push(&mut b.weight);
                    out.push(&mut b.bias);
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Conv { conv, .. } => conv.weight.len() + conv.bias.len(),
                Block::Residual { a, b } => {
                    a.weight.len() + a.bias.len() + b.weight.len() + b.bias.len()
                }
            })
            .sum()
    }

    pub fn out_channels(&self) -> usize {
        match self.blocks.last() {
            Some(Block::Conv { conv, .. }) => conv.cout,
            Some(Block::Residual { b, .. }) => b.cout,
            None => 0,
        }
    }
}

/// Fully connected layer on row vectors: `y = W x + b`, `W` is `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / input as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            input,
            output,
            weight: (0..input * output).map(|_| dist.sample(rng) as f32).collect(),
            bias: vec![0.0; output],
        }
    }

    /// `x` is `[n, input]` row-major; returns `[n, output]`.
    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        let xv = ndarray::ArrayView2::from_shape((n, self.input), x).expect("shape");
        let wv = ndarray::ArrayView2::from_shape((self.output, self.input), &self.weight)
            .expect("shape");
        let mut y = ndarray::Array2::<f32>::zeros((n, self.output));
        for mut row in y.rows_mut() {
            row.assign(&ndarray::ArrayView1::from(&self.bias));
        }
        ndarray::linalg::general_mat_mul(1.0, &xv, &wv.t(), 1.0, &mut y);
        y.into_raw_vec_and_offset().0
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn backward(&self, x: &[f32], n: usize, dy: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let xv = ndarray::ArrayView2::from_shape((n, self.input), x).expect("shape");
        let dyv = ndarray::ArrayView2::from_shape((n, self.output), dy).expect("shape");
        let wv = ndarray::ArrayView2::from_shape((self.output, self.input), &self.weight)
            .expect("shape");
        let dx = dyv.dot(&wv);
        let dw = dyv.t().dot(&xv);
        let db = dyv.sum_axis(ndarray::Axis(0));
        (
            dx.into_raw_vec_and_offset().0,
            dw.as_standard_layout().to_owned().into_raw_vec_and_offset().0,
            db.to_vec(),
        )
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_net(rng: &mut Rng) -> ConvNet {
        ConvNet {
            blocks: vec![
                Block::Conv {
                    conv: Conv2d::new(2, 3, 3, 2, 1, rng),
                    activate: true,
                },
                Block::Residual {
                    a: Conv2d::new(3, 3, 3, 1, 1, rng),
                    b: Conv2d::new(3, 3, 3, 1, 1, rng),
                },
                Block::Conv {
                    conv: Conv2d::new(3, 2, 1, 1, 0, rng),
                    activate: false,
                },
            ],
        }
    }

    fn objective(net: &ConvNet, x: &Tensor, target: &[f32]) -> f64 {
        let y = net.forward(x);
        y.data
            .iter()
            .zip(target)
            .map(|(a, b)| 0.5 * ((*a - *b) as f64).powi(2))
            .sum()
    }

    #[test]
    fn convnet_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(1);
        let mut net = small_net(&mut rng);
        let mut x = Tensor::zeros(2, 2, 6, 5);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f32 - 5.0) / 5.0;
        }
        let (y, cache) = net.forward_train(&x);
        let target: Vec<f32> = (0..y.data.len()).map(|i| (i % 3) as f32 * 0.2).collect();
        let mut dy = y.clone();
        for (d, t) in dy.data.iter_mut().zip(&target) {
            *d -= *t;
        }
        let grads = net.backward(cache, dy);

        let h = 1e-3f32;
        let mut checked = 0;
        let n_params = net.params_mut().len();
        for p in 0..n_params {
            let len = net.params_mut()[p].len();
            for idx in (0..len).step_by(7) {
                let orig = net.params_mut()[p][idx];
                net.params_mut()[p][idx] = orig + h;
                let up = objective(&net, &x, &target);
                net.params_mut()[p][idx] = orig - h;
                let down = objective(&net, &x, &target);
                net.params_mut()[p][idx] = orig;
                let numeric = (up - down) / (2.0 * h as f64);
                let analytic = grads[p][idx] as f64;
                assert!(
                    (numeric - analytic).abs() <= 2e-2 * numeric.abs().max(analytic.abs()).max(0.05),
                    "param {p}[{idx}]: numeric {numeric} analytic {analytic}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(2);
        let lin = Linear::new(4, 3, &mut rng);
        let x: Vec<f32> = (0..8).map(|i| i as f32 * 0.1 - 0.3).collect();
        let y = lin.forward(&x, 2);
        let (dx, dw, db) = lin.backward(&x, 2, &y);
        // objective 0.5 * |y|^2
        let obj = |l: &Linear, x: &[f32]| -> f64 {
            l.forward(x, 2).iter().map(|v| 0.5 * (*v as f64).powi(2)).sum()
        };
        let h = 1e-3f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let num = (obj(&lin, &xp) - obj(&lin, &xm)) / (2.0 * h as f64);
            assert!((num - dx[i] as f64).abs() < 1e-3, "dx[{i}]");
        }
        for i in 0..lin.weight.len() {
            let mut lp = lin.clone();
            lp.weight[i] += h;
            let mut lm = lin.clone();
            lm.weight[i] -= h;
            let num = (obj(&lp, &x) - obj(&lm, &x)) / (2.0 * h as f64);
            assert!((num - dw[i] as f64).abs() < 1e-3, "dw[{i}]");
        }
        let mut lp = lin.clone();
        lp.bias[1] += h;
        let mut lm = lin.clone();
        lm.bias[1] -= h;
        let num = (obj(&lp, &x) - obj(&lm, &x)) / (2.0 * h as f64);
        assert!((num - db[1] as f64).abs() < 1e-3);
    }
}
