//! Float pixel patches in channel-major (CHW) layout, values in `[0, 1]`.

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; CHANNELS * width * height],
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        Self::crop_rgb(img, 0, 0, img.width() as usize, img.height() as usize)
    }

    /// Pixels in `[x0, x1) x [y0, y1)`; the rectangle must lie inside the image.
    pub fn crop_rgb(img: &RgbImage, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let mut p = Patch::zeros(x1 - x0, y1 - y0);
        for y in y0..y1 {
            for x in x0..x1 {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..CHANNELS {
                    p.set(c, y - y0, x - x0, px[c] as f32 / 255.0);
                }
            }
        }
        p
    }

    /// Sub-rectangle of this patch.
    pub fn sub(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let mut p = Patch::zeros(x1 - x0, y1 - y0);
        for c in 0..CHANNELS {
            for y in y0..y1 {
                for x in x0..x1 {
                    p.set(c, y - y0, x - x0, self.get(c, y, x));
                }
            }
        }
        p
    }

    pub fn to_rgb(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    *v = (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` covered by a normalized box, clamped to
/// the image. `None` when rounding leaves an empty rectangle.
pub fn pixel_rect(
    bbox: &crate::geometry::BBox,
    width: usize,
    height: usize,
) -> Option<(usize, usize, usize, usize)> {
    let conv = |v: f64, n: usize| (v * n as f64).round().clamp(0.0, n as f64) as usize;
    let x0 = conv(bbox.x_min(), width);
    let x1 = conv(bbox.x_max(), width);
    let y0 = conv(bbox.y_min(), height);
    let y1 = conv(bbox.y_max(), height);
    (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
}
