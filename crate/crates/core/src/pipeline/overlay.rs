use image::{imageops, Rgb, RgbImage};

use crate::geometry::BBox;

pub const PSEUDO_COLOR: Rgb<u8> = Rgb([148, 0, 211]);
pub const GT_COLOR: Rgb<u8> = Rgb([0, 200, 0]);

/// Inclusive pixel corners `(x0, y0, x1, y1)` of `bbox` on a `width`×`height`
/// image upscaled by `scale`, or `None` when nothing of the box is visible.
pub fn overlay_rect(bbox: &BBox, width: u32, height: u32, scale: u32) -> Option<(u32, u32, u32, u32)> {
    let (sw, sh) = ((width * scale) as f64, (height * scale) as f64);
    let x0 = (bbox.x_min() * sw).round().max(0.0);
    let y0 = (bbox.y_min() * sh).round().max(0.0);
    let x1 = ((bbox.x_max() * sw).round() - 1.0).min(sw - 1.0);
    let y1 = ((bbox.y_max() * sh).round() - 1.0).min(sh - 1.0);
    (x0 <= x1 && y0 <= y1).then_some((x0 as u32, y0 as u32, x1 as u32, y1 as u32))
}

/// Outline; `dash` > 0 leaves gaps of that many pixels between dashes.
fn draw_rect(img: &mut RgbImage, (x0, y0, x1, y1): (u32, u32, u32, u32), color: Rgb<u8>, dash: u32) {
    let on = |t: u32| dash == 0 || (t / dash) % 2 == 0;
    for x in x0..=x1 {
        if on(x - x0) {
            img.put_pixel(x, y0, color);
            img.put_pixel(x, y1, color);
        }
    }
    for y in y0..=y1 {
        if on(y - y0) {
            img.put_pixel(x0, y, color);
            img.put_pixel(x1, y, color);
        }
    }
}

/// Nearest-neighbour upscale of `image` with ground truths drawn as dashed
/// green outlines and pseudo-labels as solid violet ones on top.
pub fn draw_overlay(image: &RgbImage, pseudo: &[BBox], gts: &[BBox], scale: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut out = imageops::resize(image, w * scale, h * scale, imageops::FilterType::Nearest);
    for b in gts {
        if let Some(r) = overlay_rect(b, w, h, scale) {
            draw_rect(&mut out, r, GT_COLOR, 2);
        }
    }
    for b in pseudo {
        if let Some(r) = overlay_rect(b, w, h, scale) {
            draw_rect(&mut out, r, PSEUDO_COLOR, 0);
        }
    }
    out
}
