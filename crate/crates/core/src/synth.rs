//! Synthetic layout pages with exact annotations.
//!
//! Each category in the palette is drawn in its own gray band, alternating
//! between solid fills and stacks of text-like lines, so that a small
//! network can tell categories apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{InstanceMask, Polygon};
use crate::model::{validate_dataset, BBox, Dataset, Instance, PageRecord, Subset, Taxonomy};

/// Row-major `height × width × 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PageImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl PageImage {
    pub fn filled(width: u32, height: u32, v: f32) -> Self {
        Self { width, height, data: vec![v; (width * height * 3) as usize] }
    }

    pub fn get(&self, x: u32, y: u32, c: usize) -> f32 {
        self.data[((y * self.width + x) * 3) as usize + c]
    }

    fn put(&mut self, x: u32, y: u32, v: f32) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].iter_mut().for_each(|p| *p = v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutFamily {
    /// Full-width blocks stacked top to bottom.
    Rectangular,
    /// Guillotine partition of the content area.
    Manhattan,
    /// Guillotine partition with notched, non-rectangular regions.
    NonManhattan,
    /// Two or three columns, each stacked with blocks.
    MultiColumn,
}

impl std::str::FromStr for LayoutFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rectangular" => LayoutFamily::Rectangular,
            "manhattan" => LayoutFamily::Manhattan,
            "non_manhattan" => LayoutFamily::NonManhattan,
            "multi_column" => LayoutFamily::MultiColumn,
            _ => return Err(Error::Format(format!("unknown layout family {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPageSpec {
    pub family: LayoutFamily,
    /// Category ids drawn from `taxonomy`.
    pub palette: Vec<u32>,
    pub taxonomy: Taxonomy,
    /// Inclusive range of instances per page.
    pub instances: (usize, usize),
    pub width: u32,
    pub height: u32,
    pub margin: u32,
    pub gap: u32,
    pub min_block: u32,
}

impl SynthPageSpec {
    /// A small-page default over common M6Doc labels.
    pub fn toy(family: LayoutFamily) -> Self {
        let taxonomy = crate::taxonomy::m6doc();
        let palette = ["paragraph", "figure", "table", "headline"].iter().map(|n| taxonomy.id_of(n).unwrap()).collect();
        Self { family, palette, taxonomy, instances: (2, 5), width: 128, height: 128, margin: 8, gap: 6, min_block: 12 }
    }

    fn check(&self) -> Result<()> {
        let (lo, hi) = self.instances;
        if lo == 0 || lo > hi {
            return Err(Error::Infeasible(format!("instance range {lo}..={hi}")));
        }
        if self.palette.is_empty() || self.palette.iter().any(|c| !self.taxonomy.contains(*c)) {
            return Err(Error::Infeasible("palette must be non-empty and inside the taxonomy".into()));
        }
        let cw = self.width.saturating_sub(2 * self.margin);
        let ch = self.height.saturating_sub(2 * self.margin);
        let cell = (self.min_block + self.gap) as u64;
        let fits = match self.family {
            LayoutFamily::Rectangular => (hi as u64) * cell <= ch as u64 + self.gap as u64 && cw >= self.min_block,
            _ => (hi as u64) * cell * cell * 2 <= (cw as u64 + self.gap as u64) * (ch as u64 + self.gap as u64),
        };
        if !fits || cw < self.min_block || ch < self.min_block {
            return Err(Error::Infeasible(format!(
                "{hi} instances of at least {}px do not fit a {}x{} page",
                self.min_block, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl Rect {
    fn w(&self) -> u32 {
        self.x1 - self.x0
    }
    fn h(&self) -> u32 {
        self.y1 - self.y0
    }
}

/// Intensity band of palette slot `k` of `n`.
pub fn palette_gray(k: usize, n: usize) -> f32 {
    if n <= 1 {
        0.3
    } else {
        0.1 + 0.6 * k as f32 / (n - 1) as f32
    }
}

/// Split `len` into `parts` pieces of at least `min`, separated by `gap`.
fn cut_lengths(rng: &mut ChaCha8Rng, len: u32, parts: usize, min: u32, gap: u32) -> Vec<u32> {
    let usable = len - gap * (parts as u32 - 1);
    let spare = usable - min * parts as u32;
    let weights: Vec<f64> = (0..parts).map(|_| rng.gen_range(0.2..1.0)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut out: Vec<u32> = weights.iter().map(|w| min + (spare as f64 * w / wsum).floor() as u32).collect();
    let used: u32 = out.iter().sum();
    *out.last_mut().unwrap() += usable - used;
    out
}

fn stack(rng: &mut ChaCha8Rng, area: Rect, n: usize, min: u32, gap: u32) -> Vec<Rect> {
    let hs = cut_lengths(rng, area.h(), n, min, gap);
    let mut y = area.y0;
    hs.into_iter()
        .map(|h| {
            let r = Rect { x0: area.x0, y0: y, x1: area.x1, y1: y + h };
            y += h + gap;
            r
        })
        .collect()
}

fn guillotine(rng: &mut ChaCha8Rng, area: Rect, n: usize, min: u32, gap: u32) -> Vec<Rect> {
    let mut leaves = vec![area];
    while leaves.len() < n {
        // split the largest leaf that can still be divided
        let mut idx: Vec<usize> = (0..leaves.len()).collect();
        idx.sort_by_key(|&i| std::cmp::Reverse(leaves[i].w() * leaves[i].h()));
        let mut done = false;
        'leaf: for i in idx {
            let r = leaves[i];
            let can_v = r.w() >= 2 * min + gap;
            let can_h = r.h() >= 2 * min + gap;
            let vertical = match (can_v, can_h) {
                (false, false) => continue,
                (true, false) => true,
                (false, true) => false,
                (true, true) => rng.gen_bool(if r.w() > r.h() { 0.7 } else { 0.3 }),
            };
            let len = if vertical { r.w() } else { r.h() };
            let lo = min;
            let hi = len - gap - min;
            let cut = rng.gen_range(lo..=hi);
            let (a, b) = if vertical {
                (Rect { x1: r.x0 + cut, ..r }, Rect { x0: r.x0 + cut + gap, ..r })
            } else {
                (Rect { y1: r.y0 + cut, ..r }, Rect { y0: r.y0 + cut + gap, ..r })
            };
            leaves[i] = a;
            leaves.push(b);
            done = true;
            break 'leaf;
        }
        if !done {
            break;
        }
    }
    leaves.sort_by_key(|r| (r.y0, r.x0));
    leaves
}

fn columns(rng: &mut ChaCha8Rng, area: Rect, n: usize, min: u32, gap: u32) -> Vec<Rect> {
    let max_cols = ((area.w() + gap) / (min + gap)).clamp(1, 3) as usize;
    let ncols = rng.gen_range(2..=3).min(max_cols).min(n);
    let widths = cut_lengths(rng, area.w(), ncols, min, gap);
    let mut counts = vec![1usize; ncols];
    for _ in ncols..n {
        let fit: Vec<usize> = (0..ncols).filter(|&c| (counts[c] as u32 + 1) * (min + gap) <= area.h() + gap).collect();
        if fit.is_empty() {
            break;
        }
        counts[fit[rng.gen_range(0..fit.len())]] += 1;
    }
    let mut out = Vec::new();
    let mut x = area.x0;
    for (c, w) in widths.into_iter().enumerate() {
        let col = Rect { x0: x, y0: area.y0, x1: x + w, y1: area.y1 };
        out.extend(stack(rng, col, counts[c], min, gap));
        x += w + gap;
    }
    out.sort_by_key(|r| (r.y0, r.x0));
    out
}

/// An L-shaped region: the rectangle with one corner cut away.
fn notch(rng: &mut ChaCha8Rng, r: Rect, min: u32) -> Vec<(f64, f64)> {
    let cw = rng.gen_range(min / 2..=r.w() / 2).max(1);
    let chh = rng.gen_range(min / 2..=r.h() / 2).max(1);
    let (x0, y0, x1, y1) = (r.x0 as f64, r.y0 as f64, r.x1 as f64, r.y1 as f64);
    let (cx, cy) = (cw as f64, chh as f64);
    match rng.gen_range(0..4) {
        0 => vec![(x0 + cx, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0 + cy), (x0 + cx, y0 + cy)],
        1 => vec![(x0, y0), (x1 - cx, y0), (x1 - cx, y0 + cy), (x1, y0 + cy), (x1, y1), (x0, y1)],
        2 => vec![(x0, y0), (x1, y0), (x1, y1 - cy), (x1 - cx, y1 - cy), (x1 - cx, y1), (x0, y1)],
        _ => vec![(x0, y0), (x1, y0), (x1, y1), (x0 + cx, y1), (x0 + cx, y1 - cy), (x0, y1 - cy)],
    }
}

fn draw(img: &mut PageImage, region: &crate::mask::Bitmap, r: Rect, gray: f32, lines: bool) {
    for y in r.y0..r.y1 {
        // text-like stacks: 3 px ink, 2 px leading, first and last rows inked
        let row_on = !lines || (y - r.y0) % 5 < 3 || y + 1 == r.y1;
        if !row_on {
            continue;
        }
        for x in r.x0..r.x1 {
            if region.get(x, y) {
                img.put(x, y, gray);
            }
        }
    }
}

/// Render one page and its ground truth.
pub fn generate_page(spec: &SynthPageSpec, image_id: u64, rng: &mut ChaCha8Rng) -> Result<(PageRecord, PageImage)> {
    spec.check()?;
    let n = rng.gen_range(spec.instances.0..=spec.instances.1);
    let m = spec.margin;
    let area = Rect { x0: m, y0: m, x1: spec.width - m, y1: spec.height - m };
    let (min, gap) = (spec.min_block, spec.gap);
    let rects = match spec.family {
        LayoutFamily::Rectangular => stack(rng, area, n, min, gap),
        LayoutFamily::Manhattan | LayoutFamily::NonManhattan => guillotine(rng, area, n, min, gap),
        LayoutFamily::MultiColumn => columns(rng, area, n, min, gap),
    };
    let mut page = PageRecord::new(image_id, spec.width, spec.height);
    page.subset = Some(Subset::Synthetic);
    let mut img = PageImage::filled(spec.width, spec.height, 1.0);
    let np = spec.palette.len();
    for r in rects {
        let k = rng.gen_range(0..np);
        let poly = if spec.family == LayoutFamily::NonManhattan && rng.gen_bool(0.5) && r.w() >= min && r.h() >= min {
            Polygon::new(notch(rng, r, min))
        } else {
            Polygon::rect(&BBox::new(r.x0 as f64, r.y0 as f64, r.x1 as f64, r.y1 as f64))
        };
        let mask = InstanceMask::Polygons(vec![poly]);
        let raster = mask.rasterize(spec.width, spec.height);
        draw(&mut img, &raster, r, palette_gray(k, np), k % 2 == 1);
        let bbox = crate::geometry::box_from_mask_raster(&raster).expect("non-empty block");
        page.instances.push(Instance { category_id: spec.palette[k], bbox: Some(bbox), mask: Some(mask), score: None });
    }
    Ok((page, img))
}

/// Deterministic corpus of `n` pages with image ids `1..=n`.
pub fn generate_corpus(spec: &SynthPageSpec, n: usize, seed: u64) -> Result<(Dataset, Vec<PageImage>)> {
    if n == 0 {
        return Err(Error::Infeasible("corpus needs at least one page".into()));
    }
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::new(spec.taxonomy.clone());
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let (p, img) = generate_page(spec, i as u64 + 1, &mut rng)?;
        d.pages.push(p);
        images.push(img);
    }
    debug_assert!(validate_dataset(&d).is_empty());
    Ok((d, images))
}
