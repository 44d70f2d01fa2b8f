//! Bounding boxes, IoU and the grid/image coordinate transforms.
//!
//! Boxes are kept in normalized center format `(cx, cy, w, h)`, each a
//! fraction of the image size. Grid-relative predictions store the center
//! offset `(dx, dy)` as a fraction of the full image, so decoding is a plain
//! addition onto the cell's top-left corner; sizes are log-scale factors
//! relative to an anchor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Normalized corner format, used only at file boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Grid-relative box: center offset inside a cell plus log-scale size factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelBox {
    pub dx: f64,
    pub dy: f64,
    pub log_w: f64,
    pub log_h: f64,
}

/// Cell `(i, j)` of a `g x g` grid; `i` is the row, `j` the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub i: usize,
    pub j: usize,
    pub g: usize,
}

/// Anchor dimensions as fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Geometry(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn x_min(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x_max(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y_min(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y_max(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_corners(&self) -> Corners {
        Corners {
            x_min: self.x_min(),
            y_min: self.y_min(),
            x_max: self.x_max(),
            y_max: self.y_max(),
        }
    }

    /// IoU without validation. Zero-area intersection or union yields 0.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = self.x_max().min(other.x_max()) - self.x_min().max(other.x_min());
        let ih = self.y_max().min(other.y_max()) - self.y_min().max(other.y_min());
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        // areas from the corners so that identical boxes give exactly 1
        let area = |b: &BBox| (b.x_max() - b.x_min()) * (b.y_max() - b.y_min());
        let union = area(self) + area(other) - inter;
        if union <= 0.0 {
            return 0.0;
        }
        (inter / union).clamp(0.0, 1.0)
    }
}

impl Corners {
    pub fn to_bbox(&self) -> BBox {
        BBox {
            cx: (self.x_min + self.x_max) / 2.0,
            cy: (self.y_min + self.y_max) / 2.0,
            w: self.x_max - self.x_min,
            h: self.y_max - self.y_min,
        }
    }
}

impl From<BBox> for Corners {
    fn from(b: BBox) -> Self {
        b.to_corners()
    }
}

impl From<Corners> for BBox {
    fn from(c: Corners) -> Self {
        c.to_bbox()
    }
}

impl GridCell {
    pub fn new(i: usize, j: usize, g: usize) -> Result<Self> {
        if g == 0 || i >= g || j >= g {
            return Err(Error::Geometry(format!("cell ({i},{j}) outside a {g}x{g} grid")));
        }
        Ok(Self { i, j, g })
    }

    /// Cell whose area contains the point; points on the far edge map to the last cell.
    pub fn containing(cx: f64, cy: f64, g: usize) -> Self {
        let idx = |v: f64| ((v * g as f64).floor().max(0.0) as usize).min(g - 1);
        Self {
            i: idx(cy),
            j: idx(cx),
            g,
        }
    }

    /// Left edge of the cell as a fraction of image width.
    pub fn x0(&self) -> f64 {
        self.j as f64 / self.g as f64
    }

    /// Top edge of the cell as a fraction of image height.
    pub fn y0(&self) -> f64 {
        self.i as f64 / self.g as f64
    }

    pub fn size(&self) -> f64 {
        1.0 / self.g as f64
    }
}

impl AnchorSpec {
    /// Anchor box placed at the given center, used for shape-only matching.
    pub fn at(&self, cx: f64, cy: f64) -> BBox {
        BBox::new(cx, cy, self.w, self.h)
    }
}

/// IoU of two valid boxes; symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// Maximum IoU of `bbox` over `refs` with the index achieving it.
///
/// Ties resolve to the lowest index. An empty reference set yields `(0.0, None)`.
pub fn max_iou(bbox: &BBox, refs: &[BBox]) -> Result<(f64, Option<usize>)> {
    bbox.validate()?;
    let mut best = (0.0, None);
    for (idx, r) in refs.iter().enumerate() {
        let v = iou(bbox, r)?;
        if best.1.is_none() || v > best.0 {
            best = (v, Some(idx));
        }
    }
    Ok(best)
}

/// Transfers a grid-relative prediction into image coordinates.
pub fn decode_to_image(rel: &RelBox, cell: &GridCell, anchor: &AnchorSpec) -> Result<BBox> {
    let w = anchor.w * rel.log_w.exp();
    let h = anchor.h * rel.log_h.exp();
    let b = BBox::new(cell.x0() + rel.dx, cell.y0() + rel.dy, w, h);
    if ![b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite()) {
        return Err(Error::Geometry(format!("non-finite decode of {rel:?}")));
    }
    Ok(b)
}

/// Inverse of [`decode_to_image`]; the box center must lie inside `cell`.
pub fn encode_from_image(bbox: &BBox, cell: &GridCell, anchor: &AnchorSpec) -> Result<RelBox> {
    bbox.validate()?;
    let dx = bbox.cx - cell.x0();
    let dy = bbox.cy - cell.y0();
    let tol = 1e-12;
    let size = cell.size();
    if dx < -tol || dy < -tol || dx > size + tol || dy > size + tol {
        return Err(Error::Geometry(format!(
            "box center ({}, {}) outside cell ({}, {})",
            bbox.cx, bbox.cy, cell.i, cell.j
        )));
    }
    Ok(RelBox {
        dx,
        dy,
        log_w: (bbox.w / anchor.w).ln(),
        log_h: (bbox.h / anchor.h).ln(),
    })
}

/// Clamps the corners of a box to the unit square.
pub fn clip(bbox: &BBox) -> Result<BBox> {
    bbox.validate()?;
    if bbox.x_min() >= 0.0 && bbox.y_min() >= 0.0 && bbox.x_max() <= 1.0 && bbox.y_max() <= 1.0 {
        return Ok(*bbox);
    }
    let c = Corners {
        x_min: bbox.x_min().clamp(0.0, 1.0),
        y_min: bbox.y_min().clamp(0.0, 1.0),
        x_max: bbox.x_max().clamp(0.0, 1.0),
        y_max: bbox.y_max().clamp(0.0, 1.0),
    };
    if c.x_max <= c.x_min || c.y_max <= c.y_min {
        return Err(Error::Geometry(format!("box {bbox:?} lies outside the image")));
    }
    Ok(c.to_bbox())
}
