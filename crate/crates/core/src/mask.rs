//! Instance masks: polygon lists and page-sized binary rasters.
//!
//! Pixels follow the half-open convention: pixel `(x, y)` covers
//! `[x, x+1) × [y, y+1)` and is "on" for a polygon when its center
//! `(x + 0.5, y + 0.5)` is inside under the even-odd rule.

use crate::model::BBox;

/// A closed polygon in page pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub points: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    /// Axis-aligned rectangle polygon, clockwise from the top-left corner.
    pub fn rect(b: &BBox) -> Self {
        Self::new(vec![(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_max, b.y_max), (b.x_min, b.y_max)])
    }

    /// Decode COCO's flat `[x1, y1, x2, y2, ...]` layout.
    pub fn from_flat(flat: &[f64]) -> Self {
        Self::new(flat.chunks_exact(2).map(|c| (c[0], c[1])).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    /// Shoelace area (absolute value).
    pub fn area(&self) -> f64 {
        let n = self.points.len();
        if n < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let (x0, y0) = self.points[i];
            let (x1, y1) = self.points[(i + 1) % n];
            acc += x0 * y1 - x1 * y0;
        }
        acc.abs() * 0.5
    }

    /// Extent of the vertices, `None` for an empty polygon.
    pub fn extent(&self) -> Option<BBox> {
        let mut it = self.points.iter();
        let &(x, y) = it.next()?;
        let mut b = BBox::new(x, y, x, y);
        for &(x, y) in it {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x);
            b.y_max = b.y_max.max(y);
        }
        Some(b)
    }

    pub fn map_points(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        Self::new(self.points.iter().map(|&(x, y)| f(x, y)).collect())
    }

    /// Sutherland–Hodgman clip against an axis-aligned rectangle.
    pub fn clip_to(&self, b: &BBox) -> Self {
        let mut pts = self.points.clone();
        let edges: [(fn(f64, f64, &BBox) -> bool, usize); 4] =
            [(|x, _, b| x >= b.x_min, 0), (|x, _, b| x <= b.x_max, 1), (|_, y, b| y >= b.y_min, 2), (|_, y, b| y <= b.y_max, 3)];
        for (inside, kind) in edges {
            if pts.is_empty() {
                break;
            }
            let input = std::mem::take(&mut pts);
            let n = input.len();
            for i in 0..n {
                let cur = input[i];
                let prev = input[(i + n - 1) % n];
                let cin = inside(cur.0, cur.1, b);
                let pin = inside(prev.0, prev.1, b);
                if cin {
                    if !pin {
                        pts.push(intersect(prev, cur, kind, b));
                    }
                    pts.push(cur);
                } else if pin {
                    pts.push(intersect(prev, cur, kind, b));
                }
            }
        }
        Self::new(pts)
    }
}

fn intersect(p: (f64, f64), q: (f64, f64), kind: usize, b: &BBox) -> (f64, f64) {
    match kind {
        0 | 1 => {
            let x = if kind == 0 { b.x_min } else { b.x_max };
            let t = (x - p.0) / (q.0 - p.0);
            (x, p.1 + t * (q.1 - p.1))
        }
        _ => {
            let y = if kind == 2 { b.y_min } else { b.y_max };
            let t = (y - p.1) / (q.1 - p.1);
            (p.0 + t * (q.0 - p.0), y)
        }
    }
}

/// A binary raster with the dimensions of its page.
///
/// Only a window of the page is stored; pixels outside the window are off.
/// Equality is pixelwise, independent of the stored window.
#[derive(Debug, Clone)]
pub struct Bitmap {
    width: u32,
    height: u32,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, x0: 0, y0: 0, w: 0, h: 0, bits: Vec::new() }
    }

    /// An all-off raster whose storable window is the given pixel range.
    pub fn with_window(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let x1 = x1.min(width);
        let y1 = y1.min(height);
        let x0 = x0.min(x1);
        let y0 = y0.min(y1);
        let (w, h) = (x1 - x0, y1 - y0);
        Self { width, height, x0, y0, w, h, bits: vec![false; (w * h) as usize] }
    }

    pub fn full(width: u32, height: u32) -> Self {
        let mut b = Self::with_window(width, height, 0, 0, width, height);
        b.bits.iter_mut().for_each(|v| *v = true);
        b
    }

    /// Build from a dense row-major page-sized buffer.
    pub fn from_dense(width: u32, height: u32, data: &[bool]) -> Self {
        assert_eq!(data.len(), (width as usize) * (height as usize));
        Self { width, height, x0: 0, y0: 0, w: width, h: height, bits: data.to_vec() }.tightened()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.w || y >= self.y0 + self.h {
            return false;
        }
        self.bits[((y - self.y0) * self.w + (x - self.x0)) as usize]
    }

    /// Set a pixel inside the window. Panics outside it.
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        assert!(x >= self.x0 && y >= self.y0 && x < self.x0 + self.w && y < self.y0 + self.h);
        self.bits[((y - self.y0) * self.w + (x - self.x0)) as usize] = v;
    }

    /// Stored window `[x0, x1) × [y0, y1)`.
    pub fn window(&self) -> (u32, u32, u32, u32) {
        (self.x0, self.y0, self.x0 + self.w, self.y0 + self.h)
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight pixel bounds `[x0, x1) × [y0, y1)` of the on-pixels.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let mut out: Option<(u32, u32, u32, u32)> = None;
        for yy in 0..self.h {
            let row = &self.bits[(yy * self.w) as usize..((yy + 1) * self.w) as usize];
            let first = row.iter().position(|&b| b);
            if let Some(f) = first {
                let l = row.iter().rposition(|&b| b).unwrap();
                let (x0, x1) = (self.x0 + f as u32, self.x0 + l as u32 + 1);
                let y = self.y0 + yy;
                out = Some(match out {
                    None => (x0, y, x1, y + 1),
                    Some((a, b, c, _)) => (a.min(x0), b, c.max(x1), y + 1),
                });
            }
        }
        out
    }

    /// Same pixels, window shrunk to the on-pixel bounds.
    pub fn tightened(&self) -> Self {
        match self.bounds() {
            None => Self::empty(self.width, self.height),
            Some((x0, y0, x1, y1)) => {
                let mut out = Self::with_window(self.width, self.height, x0, y0, x1, y1);
                for y in y0..y1 {
                    for x in x0..x1 {
                        if self.get(x, y) {
                            out.set(x, y, true);
                        }
                    }
                }
                out
            }
        }
    }

    /// Horizontal runs `(y, x_start, x_end)` of on-pixels, row-major.
    pub fn runs(&self) -> Vec<(u32, u32, u32)> {
        let mut out = Vec::new();
        for yy in 0..self.h {
            let mut xx = 0;
            while xx < self.w {
                if self.bits[(yy * self.w + xx) as usize] {
                    let start = xx;
                    while xx < self.w && self.bits[(yy * self.w + xx) as usize] {
                        xx += 1;
                    }
                    out.push((self.y0 + yy, self.x0 + start, self.x0 + xx));
                } else {
                    xx += 1;
                }
            }
        }
        out
    }

    /// Number of pixels on in both rasters, scanning only the window overlap.
    pub fn intersection_count(&self, other: &Bitmap) -> u64 {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = (self.x0 + self.w).min(other.x0 + other.w);
        let y1 = (self.y0 + self.h).min(other.y0 + other.h);
        let mut n = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                if self.get(x, y) && other.get(x, y) {
                    n += 1;
                }
            }
        }
        n
    }
}

impl PartialEq for Bitmap {
    fn eq(&self, other: &Self) -> bool {
        if self.width != other.width || self.height != other.height {
            return false;
        }
        let a = self.tightened();
        let b = other.tightened();
        a.window() == b.window() && a.bits == b.bits
    }
}

/// Ground-truth or predicted mask of one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum InstanceMask {
    Polygons(Vec<Polygon>),
    Raster(Bitmap),
}

impl InstanceMask {
    /// Rasterize onto a `width × height` page. Rasters are returned as-is.
    pub fn rasterize(&self, width: u32, height: u32) -> Bitmap {
        match self {
            InstanceMask::Raster(b) => b.clone(),
            InstanceMask::Polygons(polys) => rasterize_polygons(polys, width, height),
        }
    }

    /// Exact polygon representation of the rasterized mask.
    pub fn polygonize(&self, width: u32, height: u32) -> Vec<Polygon> {
        polygonize(&self.rasterize(width, height))
    }
}

/// Even-odd fill of each polygon, union across polygons.
pub fn rasterize_polygons(polys: &[Polygon], width: u32, height: u32) -> Bitmap {
    let extent = polys.iter().filter_map(|p| p.extent()).reduce(|a, b| a.union_hull(&b));
    let Some(ext) = extent else {
        return Bitmap::empty(width, height);
    };
    let px0 = pixel_start(ext.x_min, width);
    let px1 = pixel_start(ext.x_max, width);
    let py0 = pixel_start(ext.y_min, height);
    let py1 = pixel_start(ext.y_max, height);
    let mut out = Bitmap::with_window(width, height, px0, py0, px1, py1);
    let mut xs: Vec<f64> = Vec::new();
    for poly in polys {
        let n = poly.points.len();
        if n < 3 {
            continue;
        }
        for y in py0..py1 {
            let yc = y as f64 + 0.5;
            xs.clear();
            for i in 0..n {
                let (ax, ay) = poly.points[i];
                let (bx, by) = poly.points[(i + 1) % n];
                if (ay <= yc && yc < by) || (by <= yc && yc < ay) {
                    xs.push(ax + (yc - ay) * (bx - ax) / (by - ay));
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            for pair in xs.chunks_exact(2) {
                let xa = pixel_start(pair[0], width).max(px0);
                let xb = pixel_start(pair[1], width).min(px1);
                for x in xa..xb {
                    out.set(x, y, true);
                }
            }
        }
    }
    out
}

/// First pixel index whose center is at or right of `v`, clamped to `[0, limit]`.
fn pixel_start(v: f64, limit: u32) -> u32 {
    let p = (v - 0.5).ceil();
    if p <= 0.0 {
        0
    } else if p >= limit as f64 {
        limit
    } else {
        p as u32
    }
}

/// Decompose a raster into rectangles: one per maximal vertical stack of
/// identical row runs. Rasterizing the result reproduces the input exactly.
pub fn polygonize(bitmap: &Bitmap) -> Vec<Polygon> {
    let mut open: Vec<(u32, u32, u32, u32)> = Vec::new(); // x0, x1, y_start, y_last
    let mut done = Vec::new();
    let mut runs = bitmap.runs().into_iter().peekable();
    while let Some(&(y, _, _)) = runs.peek() {
        let mut row = Vec::new();
        while let Some(&(ry, a, b)) = runs.peek() {
            if ry != y {
                break;
            }
            row.push((a, b));
            runs.next();
        }
        let mut next_open = Vec::new();
        for (a, b) in row {
            if let Some(pos) = open.iter().position(|r| r.0 == a && r.1 == b && r.3 + 1 == y) {
                let mut r = open.swap_remove(pos);
                r.3 = y;
                next_open.push(r);
            } else {
                next_open.push((a, b, y, y));
            }
        }
        done.append(&mut open);
        open = next_open;
    }
    done.append(&mut open);
    done.sort_by_key(|r| (r.2, r.0));
    done.into_iter().map(|(x0, x1, y0, y1)| Polygon::rect(&BBox::new(x0 as f64, y0 as f64, x1 as f64, (y1 + 1) as f64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_polygon_covers_integer_pixels() {
        let b = rasterize_polygons(&[Polygon::rect(&BBox::new(2.0, 3.0, 5.0, 4.0))], 10, 10);
        assert_eq!(b.count(), 3);
        assert_eq!(b.bounds(), Some((2, 3, 5, 4)));
    }

    #[test]
    fn even_odd_hole() {
        // Outer square with an inner square traced in the same polygon ring set
        // via two polygons does a union; a single self-overlapping ring does even-odd.
        let ring = Polygon::new(vec![
            (0.0, 0.0),
            (6.0, 0.0),
            (6.0, 6.0),
            (0.0, 6.0),
            (0.0, 0.0),
            (2.0, 2.0),
            (2.0, 4.0),
            (4.0, 4.0),
            (4.0, 2.0),
            (2.0, 2.0),
        ]);
        let b = rasterize_polygons(&[ring], 8, 8);
        assert_eq!(b.count(), 36 - 4);
        assert!(!b.get(3, 3));
    }

    #[test]
    fn triangle_counts_centers() {
        let t = Polygon::new(vec![(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)]);
        let b = rasterize_polygons(&[t], 4, 4);
        // centers (x+.5, y+.5) with x + y + 1 < 4
        assert_eq!(b.count(), 6);
    }

    #[test]
    fn polygonize_roundtrip_ragged() {
        let mut bm = Bitmap::with_window(12, 9, 0, 0, 12, 9);
        for (x, y) in [(1, 1), (2, 1), (2, 2), (5, 5), (6, 5), (5, 6), (6, 6), (11, 8)] {
            bm.set(x, y, true);
        }
        let polys = polygonize(&bm);
        assert_eq!(rasterize_polygons(&polys, 12, 9), bm);
    }

    #[test]
    fn clip_keeps_inside_part() {
        let p = Polygon::rect(&BBox::new(-5.0, -5.0, 5.0, 5.0));
        let c = p.clip_to(&BBox::new(0.0, 0.0, 10.0, 10.0));
        assert!((c.area() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn bitmap_equality_ignores_window() {
        let mut a = Bitmap::with_window(10, 10, 0, 0, 10, 10);
        a.set(4, 4, true);
        let mut b = Bitmap::with_window(10, 10, 3, 3, 6, 6);
        b.set(4, 4, true);
        assert_eq!(a, b);
    }
}
