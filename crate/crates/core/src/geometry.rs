//! Overlap measures and box/mask conversions.

use crate::error::{Error, Result};
use crate::mask::{Bitmap, InstanceMask};
use crate::model::BBox;

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull = a.union_hull(b).area();
    if hull <= 0.0 {
        return if union <= 0.0 { 0.0 } else { inter / union };
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (hull - union) / hull
}

/// Pixelwise IoU of two page rasters.
pub fn mask_iou(a: &Bitmap, b: &Bitmap) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::DimensionMismatch(format!("{}x{} vs {}x{}", a.width(), a.height(), b.width(), b.height())));
    }
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Tightest pixel-aligned box around the on-pixels, `None` if empty.
pub fn box_from_mask_raster(m: &Bitmap) -> Option<BBox> {
    m.bounds().map(|(x0, y0, x1, y1)| BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

/// Minimum bounding rectangle of a mask rasterized on a `width × height` page.
pub fn box_from_mask(m: &InstanceMask, width: u32, height: u32) -> Result<BBox> {
    box_from_mask_raster(&m.rasterize(width, height)).ok_or(Error::EmptyMask)
}

/// Filled-rectangle raster of a box: pixels whose centers lie inside it.
pub fn mask_from_box(b: &BBox, width: u32, height: u32) -> InstanceMask {
    InstanceMask::Raster(box_raster(b, width, height))
}

pub fn box_raster(b: &BBox, width: u32, height: u32) -> Bitmap {
    let px = |v: f64, lim: u32| -> u32 { ((v - 0.5).ceil().max(0.0) as u32).min(lim) };
    let (x0, x1) = (px(b.x_min, width), px(b.x_max, width));
    let (y0, y1) = (px(b.y_min, height), px(b.y_max, height));
    let mut out = Bitmap::with_window(width, height, x0, y0, x1, y1);
    for y in y0..y1.max(y0) {
        for x in x0..x1.max(x0) {
            out.set(x, y, true);
        }
    }
    out
}
