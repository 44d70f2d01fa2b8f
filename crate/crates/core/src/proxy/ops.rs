use rand::Rng as _;

use super::AspectCenters;
use crate::nn::Tensor;
use crate::patch::{Patch, CHANNELS};
use crate::rng::Rng;

/// Zero-pads `patch` on the right and bottom to `(width, height)`; both must
/// be at least the patch size.
pub fn pad_to(patch: &Patch, width: usize, height: usize) -> Patch {
    if patch.size() == (width, height) {
        return patch.clone();
    }
    debug_assert!(width >= patch.width && height >= patch.height);
    let mut out = Patch::zeros(width, height);
    for c in 0..CHANNELS {
        for y in 0..patch.height {
            let src = patch.index(c, y, 0);
            let dst = out.index(c, y, 0);
            out.data[dst..dst + patch.width].copy_from_slice(&patch.data[src..src + patch.width]);
        }
    }
    out
}

/// Pads a crop to its nearest aspect center, never shrinking it. Returns the
/// padded crop and the chosen center.
pub fn pad_to_nearest(crop: &Patch, centers: &AspectCenters) -> (Patch, (usize, usize)) {
    let center = centers.nearest(crop.width, crop.height);
    let (w, h) = centers.padded_size(crop.width, crop.height);
    (pad_to(crop, w, h), center)
}

/// Bounds `[start, end)` of part `i` when `n` is split into `parts` near-equal pieces.
fn even_split(n: usize, parts: usize, i: usize) -> (usize, usize) {
    (i * n / parts, (i + 1) * n / parts)
}

/// Bounds of SPP bin `i` of `parts`; neighbouring bins may overlap by one so
/// that every bin is non-empty.
fn spp_bin(n: usize, parts: usize, i: usize) -> (usize, usize) {
    (i * n / parts, ((i + 1) * n).div_ceil(parts))
}

/// Zeroes patch `index` (row-major) of an `s x s` near-equal partition.
pub fn patch_drop_at(crop: &Patch, s: usize, index: usize) -> Patch {
    let (r, c) = (index / s, index % s);
    let (y0, y1) = even_split(crop.height, s, r);
    let (x0, x1) = even_split(crop.width, s, c);
    let mut out = crop.clone();
    for ch in 0..CHANNELS {
        for y in y0..y1 {
            let row = out.index(ch, y, 0);
            out.data[row + x0..row + x1].fill(0.0);
        }
    }
    out
}

/// Zeroes one uniformly chosen patch of an `s x s` partition. Crops smaller
/// than `s` pixels in either side are returned unchanged with `None`.
pub fn patch_drop(crop: &Patch, s: usize, rng: &mut Rng) -> (Patch, Option<usize>) {
    if s == 0 || crop.width < s || crop.height < s {
        return (crop.clone(), None);
    }
    let index = rng.random_range(0..s * s);
    (patch_drop_at(crop, s, index), Some(index))
}

/// Output length of [`spp_pool`] for `channels` input channels.
pub fn spp_len(channels: usize, levels: &[usize]) -> usize {
    channels * levels.iter().map(|l| l * l).sum::<usize>()
}

/// Spatial pyramid max pooling of a `[C, N, H, W]` batch. Returns
/// `[N, spp_len]` row-major features in (level, row, col, channel) order and,
/// for the backward pass, the flat tensor index of every maximum.
pub fn spp_pool(x: &Tensor, levels: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let len = spp_len(x.c, levels);
    let mut out = vec![0.0f32; x.n * len];
    let mut arg = vec![0usize; x.n * len];
    for n in 0..x.n {
        let mut k = n * len;
        for &l in levels {
            for r in 0..l {
                let (y0, y1) = spp_bin(x.h, l, r);
                for q in 0..l {
                    let (x0, x1) = spp_bin(x.w, l, q);
                    for c in 0..x.c {
                        let mut best = x.index(c, n, y0, x0);
                        for y in y0..y1 {
                            let row = x.index(c, n, y, 0);
                            for xi in x0..x1 {
                                if x.data[row + xi] > x.data[best] {
                                    best = row + xi;
                                }
                            }
                        }
                        out[k] = x.data[best];
                        arg[k] = best;
                        k += 1;
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Routes pooled-feature gradients back to the maxima.
pub fn spp_backward(shape: [usize; 4], arg: &[usize], grad: &[f32]) -> Tensor {
    let [c, n, h, w] = shape;
    let mut dx = Tensor::zeros(c, n, h, w);
    for (&i, &g) in arg.iter().zip(grad) {
        dx.data[i] += g;
    }
    dx
}
