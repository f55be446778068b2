//! Scale jitter and random crops with consistent annotation transforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdla_core::synth::PageImage;
use tdla_core::{BBox, Instance, InstanceMask, PageRecord, Polygon};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Inclusive range of the sampled shortest side.
    pub short_side: (u32, u32),
    pub max_long_side: u32,
    /// Probability of taking a random crop after resizing.
    pub crop_prob: f64,
    /// Smallest crop side as a fraction of the resized side.
    pub crop_min_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { short_side: (704, 896), max_long_side: 1333, crop_prob: 0.5, crop_min_frac: 0.6 }
    }
}

/// Largest scale meeting both the shortest-side target and the longest-side cap.
pub fn resize_scale(width: u32, height: u32, short: u32, max_long: u32) -> f64 {
    let s = short as f64 / width.min(height) as f64;
    s.min(max_long as f64 / width.max(height) as f64)
}

/// Bilinear resample at pixel centers.
pub fn resize_image(img: &PageImage, w: u32, h: u32) -> PageImage {
    if (w, h) == (img.width, img.height) {
        return img.clone();
    }
    let mut out = PageImage::filled(w, h, 0.0);
    let (sx, sy) = (img.width as f64 / w as f64, img.height as f64 / h as f64);
    let (iw, ih) = (img.width as usize, img.height as usize);
    for y in 0..h as usize {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ih - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(ih - 1);
        for x in 0..w as usize {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (iw - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(iw - 1);
            for c in 0..3 {
                let p = |xx: usize, yy: usize| img.data[(yy * iw + xx) * 3 + c] as f64;
                let v =
                    p(x0, y0) * (1.0 - tx) * (1.0 - ty) + p(x1, y0) * tx * (1.0 - ty) + p(x0, y1) * (1.0 - tx) * ty + p(x1, y1) * tx * ty;
                out.data[(y * w as usize + x) * 3 + c] = v as f32;
            }
        }
    }
    out
}

fn crop_image(img: &PageImage, x0: u32, y0: u32, w: u32, h: u32) -> PageImage {
    let mut out = PageImage::filled(w, h, 0.0);
    for y in 0..h as usize {
        let src = ((y0 as usize + y) * img.width as usize + x0 as usize) * 3;
        out.data[y * w as usize * 3..(y + 1) * w as usize * 3].copy_from_slice(&img.data[src..src + w as usize * 3]);
    }
    out
}

/// Resize to `new_w × new_h`, then optionally crop `(x0, y0, w, h)` in
/// resized pixels. Instances with nothing left inside the crop are removed.
pub fn transform(
    page: &PageRecord,
    image: &PageImage,
    new_w: u32,
    new_h: u32,
    crop: Option<(u32, u32, u32, u32)>,
) -> (PageRecord, PageImage) {
    let (sx, sy) = (new_w as f64 / page.width as f64, new_h as f64 / page.height as f64);
    let img = resize_image(image, new_w, new_h);
    let (cx, cy, cw, ch) = crop.unwrap_or((0, 0, new_w, new_h));
    let img = if crop.is_some() { crop_image(&img, cx, cy, cw, ch) } else { img };
    let (ox, oy) = (cx as f64, cy as f64);
    let window = BBox::new(0.0, 0.0, cw as f64, ch as f64);
    let map = |x: f64, y: f64| (x * sx - ox, y * sy - oy);
    let mut out = PageRecord { width: cw, height: ch, instances: Vec::new(), ..page.clone() };
    for inst in &page.instances {
        let polys: Option<Vec<Polygon>> = inst.mask.as_ref().map(|m| {
            let src = match m {
                InstanceMask::Polygons(p) => p.clone(),
                InstanceMask::Raster(_) => m.polygonize(page.width, page.height),
            };
            src.iter().map(|p| p.map_points(map).clip_to(&window)).filter(|p| p.area() > 0.0).collect()
        });
        let bbox = inst.bbox.map(|b| {
            let (x0, y0) = map(b.x_min, b.y_min);
            let (x1, y1) = map(b.x_max, b.y_max);
            BBox::new(x0.clamp(0.0, cw as f64), y0.clamp(0.0, ch as f64), x1.clamp(0.0, cw as f64), y1.clamp(0.0, ch as f64))
        });
        let empty_box = bbox.is_some_and(|b| b.area() <= 0.0);
        let empty_mask = polys.as_ref().is_some_and(|p| p.is_empty());
        if empty_box || empty_mask {
            continue;
        }
        out.instances.push(Instance { category_id: inst.category_id, bbox, mask: polys.map(InstanceMask::Polygons), score: inst.score });
    }
    (out, img)
}

/// Seeded scale jitter and crop.
pub fn augment(page: &PageRecord, image: &PageImage, seed: u64, cfg: &AugmentConfig) -> (PageRecord, PageImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let short = rng.gen_range(cfg.short_side.0..=cfg.short_side.1);
    let s = resize_scale(page.width, page.height, short, cfg.max_long_side);
    let nw = ((page.width as f64 * s).round() as u32).max(1);
    let nh = ((page.height as f64 * s).round() as u32).max(1);
    let crop = rng.gen_bool(cfg.crop_prob.clamp(0.0, 1.0)).then(|| {
        let cw = ((nw as f64 * rng.gen_range(cfg.crop_min_frac..=1.0)).round() as u32).clamp(1, nw);
        let ch = ((nh as f64 * rng.gen_range(cfg.crop_min_frac..=1.0)).round() as u32).clamp(1, nh);
        (rng.gen_range(0..=nw - cw), rng.gen_range(0..=nh - ch), cw, ch)
    });
    transform(page, image, nw, nh, crop)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(w: u32, h: u32) -> (PageRecord, PageImage) {
        let mut p = PageRecord::new(1, w, h);
        p.instances.push(Instance::from_box(1, BBox::new(10.0, 20.0, 110.0, 70.0)));
        p.instances.push(Instance::from_box(2, BBox::new(w as f64 - 50.0, h as f64 - 40.0, w as f64 - 5.0, h as f64 - 2.0)));
        (p, PageImage::filled(w, h, 0.5))
    }

    #[test]
    fn fixed_point_scale() {
        assert_eq!(resize_scale(1000, 800, 800, 1333), 1.0);
        let (p, img) = page(1000, 800);
        let (q, out) = transform(&p, &img, 1000, 800, None);
        assert_eq!(q, p);
        assert_eq!(out, img);
    }

    #[test]
    fn long_side_cap_binds() {
        for short in [704, 800, 896] {
            assert_eq!(resize_scale(4000, 1000, short, 1333), 1333.0 / 4000.0);
        }
    }

    #[test]
    fn inverse_projection_recovers_boxes() {
        let (p, img) = page(1000, 600);
        for seed in 0..10 {
            let cfg = AugmentConfig { crop_prob: 0.0, ..Default::default() };
            let (q, out) = augment(&p, &img, seed, &cfg);
            assert_eq!(q.instances.len(), 2);
            assert!(q.width.min(q.height) >= 704 && q.width.min(q.height) <= 896 && q.width.max(q.height) <= 1333);
            assert_eq!((out.width, out.height), (q.width, q.height));
            let (sx, sy) = (q.width as f64 / 1000.0, q.height as f64 / 600.0);
            for (a, b) in p.instances.iter().zip(&q.instances) {
                let (a, b) = (a.bbox.unwrap(), b.bbox.unwrap());
                for (u, v) in [(a.x_min, b.x_min / sx), (a.y_min, b.y_min / sy), (a.x_max, b.x_max / sx), (a.y_max, b.y_max / sy)] {
                    assert!((u - v).abs() <= 0.5);
                }
            }
        }
    }

    #[test]
    fn crop_drops_outside_instances() {
        let (p, img) = page(400, 300);
        let (q, out) = transform(&p, &img, 400, 300, Some((0, 0, 200, 150)));
        assert_eq!((out.width, out.height), (200, 150));
        assert_eq!(q.instances.len(), 1);
        assert_eq!(q.instances[0].bbox.unwrap(), BBox::new(10.0, 20.0, 110.0, 70.0));
        let (q, _) = transform(&p, &img, 400, 300, Some((60, 40, 340, 260)));
        assert_eq!(q.instances[0].bbox.unwrap(), BBox::new(0.0, 0.0, 50.0, 30.0));
        assert!(tdla_core::validate_dataset(&tdla_core::Dataset {
            taxonomy: tdla_core::Taxonomy::from_names("t", &["a", "b"]),
            pages: vec![q]
        })
        .is_empty());
    }
}
