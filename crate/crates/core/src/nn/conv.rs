use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::{he_normal, Tensor};
use crate::rng::Rng;

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[cout, cin * kernel * kernel]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// im2col matrix of the forward input; empty for pointwise convolutions,
/// whose input is kept instead.
pub struct ConvCache {
    cols: Vec<f32>,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: he_normal(rng, fan_in, cout * fan_in),
            bias: vec![0.0; cout],
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor, out_h: usize, out_w: usize) -> Vec<f32> {
        let k = self.kernel;
        let cols_n = x.n * out_h * out_w;
        let mut cols = vec![0.0f32; self.cin * k * k * cols_n];
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..x.n {
                        for oy in 0..out_h {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            let base = (n * out_h + oy) * out_w;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = x.index(c, n, iy as usize, 0);
                            for ox in 0..out_w {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    dst[base + ox] = x.data[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], shape: [usize; 4], out_h: usize, out_w: usize) -> Tensor {
        let [c_in, n_in, h, w] = shape;
        let k = self.kernel;
        let cols_n = n_in * out_h * out_w;
        let mut x = Tensor::zeros(c_in, n_in, h, w);
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for n in 0..n_in {
                        for oy in 0..out_h {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (n * out_h + oy) * out_w;
                            let dst_row = x.index(c, n, iy as usize, 0);
                            for ox in 0..out_w {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    x.data[dst_row + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (out_h, out_w) = self.out_size(x.h, x.w);
        let cols_n = x.n * out_h * out_w;
        let kk = self.cin * self.kernel * self.kernel;
        let cols = if self.pointwise() {
            Vec::new()
        } else {
            self.im2col(x, out_h, out_w)
        };
        let colv = if self.pointwise() {
            ArrayView2::from_shape((kk, cols_n), &x.data[..]).expect("shape")
        } else {
            ArrayView2::from_shape((kk, cols_n), &cols[..]).expect("shape")
        };
        let wv = ArrayView2::from_shape((self.cout, kk), &self.weight[..]).expect("shape");
        let mut y = Tensor::zeros(self.cout, x.n, out_h, out_w);
        for (o, b) in self.bias.iter().enumerate() {
            y.data[o * cols_n..(o + 1) * cols_n].fill(*b);
        }
        {
            let mut yv = ArrayViewMut2::from_shape((self.cout, cols_n), &mut y.data[..]).expect("shape");
            general_mat_mul(1.0, &wv, &colv, 1.0, &mut yv);
        }
        let cols = if self.pointwise() { x.data.clone() } else { cols };
        (y, ConvCache { cols, out_h, out_w })
    }

    /// Returns `(input gradient if requested, weight gradient, bias gradient)`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        input_shape: [usize; 4],
        dy: &Tensor,
        need_input_grad: bool,
    ) -> (Option<Tensor>, Vec<f32>, Vec<f32>) {
        let kk = self.cin * self.kernel * self.kernel;
        let cols_n = input_shape[1] * cache.out_h * cache.out_w;
        let dyv = ArrayView2::from_shape((self.cout, cols_n), &dy.data[..]).expect("shape");
        let colv = ArrayView2::from_shape((kk, cols_n), &cache.cols[..]).expect("shape");
        let mut dw = Array2::<f32>::zeros((self.cout, kk));
        general_mat_mul(1.0, &dyv, &colv.t(), 0.0, &mut dw);
        let db: Vec<f32> = (0..self.cout)
            .map(|o| dy.data[o * cols_n..(o + 1) * cols_n].iter().sum())
            .collect();
        let dx = need_input_grad.then(|| {
            let wv = ArrayView2::from_shape((self.cout, kk), &self.weight[..]).expect("shape");
            let mut dcols = Array2::<f32>::zeros((kk, cols_n));
            general_mat_mul(1.0, &wv.t(), &dyv, 0.0, &mut dcols);
            let dcols = dcols.into_raw_vec_and_offset().0;
            if self.pointwise() {
                let [c, n, h, w] = input_shape;
                Tensor {
                    c,
                    n,
                    h,
                    w,
                    data: dcols,
                }
            } else {
                self.col2im(&dcols, input_shape, cache.out_h, cache.out_w)
            }
        });
        (dx, dw.into_raw_vec_and_offset().0, db)
    }
}
