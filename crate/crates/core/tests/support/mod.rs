//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdla_core::split::{Split, SplitAssignment};
use tdla_core::synth::{LayoutFamily, SynthPageSpec};
use tdla_core::{BBox, Dataset, Instance, PageRecord, Taxonomy};

/// Minimum total cost over all injective row-to-column maps.
pub fn brute_force_min(c: &[Vec<f64>]) -> f64 {
    fn go(c: &[Vec<f64>], r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == c.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(c, r + 1, used, acc + c[r][j], best);
                used[j] = false;
            }
        }
    }
    let (n, m) = (c.len(), c.first().map_or(0, Vec::len));
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| c[i][j]).collect()).collect();
        return brute_force_min(&t);
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; m], 0.0, &mut best);
    if n == 0 {
        0.0
    } else {
        best
    }
}

/// A larger-palette corpus for split tests.
pub fn split_spec() -> SynthPageSpec {
    let mut s = SynthPageSpec::toy(LayoutFamily::Manhattan);
    let t = &s.taxonomy;
    s.palette = ["paragraph", "figure", "table", "headline", "caption", "page number", "header", "footer", "formula", "QR code"]
        .iter()
        .map(|n| t.id_of(n).unwrap())
        .collect();
    s.width = 256;
    s.height = 256;
    s.instances = (2, 9);
    s
}

/// Worst per-category share deviation (percentage points) over splits,
/// considering only categories with at least `min_count` instances.
pub fn max_share_deviation(d: &Dataset, a: &SplitAssignment, min_count: usize) -> f64 {
    let mut global: HashMap<u32, usize> = HashMap::new();
    let mut per: HashMap<(Split, u32), usize> = HashMap::new();
    let mut totals: HashMap<Split, usize> = HashMap::new();
    let mut all = 0usize;
    for p in &d.pages {
        let s = a.get(p.image_id).expect("every page assigned");
        for i in &p.instances {
            *global.entry(i.category_id).or_default() += 1;
            *per.entry((s, i.category_id)).or_default() += 1;
            *totals.entry(s).or_default() += 1;
            all += 1;
        }
    }
    let mut worst = 0.0f64;
    for (&c, &g) in &global {
        if g < min_count {
            continue;
        }
        let gs = g as f64 / all as f64 * 100.0;
        for s in Split::ALL {
            let t = totals.get(&s).copied().unwrap_or(0);
            if t == 0 {
                continue;
            }
            let ss = per.get(&(s, c)).copied().unwrap_or(0) as f64 / t as f64 * 100.0;
            worst = worst.max((ss - gs).abs());
        }
    }
    worst
}

pub fn eval_taxonomy() -> Taxonomy {
    Taxonomy::from_names("oracle", &["a", "b", "c"])
}

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0..40) as f64;
    let y = rng.gen_range(0..40) as f64;
    let w = rng.gen_range(2..20) as f64;
    let h = rng.gen_range(2..20) as f64;
    BBox::new(x, y, x + w, y + h)
}

/// Random (predictions, ground truth) with at most 10 images, 20 objects in
/// total on each side and 3 categories. Predictions are perturbed copies of
/// gt boxes mixed with random boxes; scores have occasional ties.
pub fn random_eval_case(seed: u64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_img = rng.gen_range(1..=10);
    let n_gt = rng.gen_range(0..=20);
    let n_pred = rng.gen_range(0..=20);
    let mut g = Dataset::new(eval_taxonomy());
    let mut p = Dataset::new(eval_taxonomy());
    for id in 0..n_img {
        g.pages.push(PageRecord::new(id as u64 + 1, 64, 64));
        p.pages.push(PageRecord::new(id as u64 + 1, 64, 64));
    }
    for _ in 0..n_gt {
        let im = rng.gen_range(0..n_img);
        g.pages[im].instances.push(Instance::from_box(rng.gen_range(1..=3), rand_box(&mut rng)));
    }
    for _ in 0..n_pred {
        let im = rng.gen_range(0..n_img);
        let base = &g.pages[im].instances;
        let (cat, b) = if !base.is_empty() && rng.gen_bool(0.7) {
            let src = &base[rng.gen_range(0..base.len())];
            let b = src.bbox.unwrap();
            let mut j = |v: f64| (v + rng.gen_range(-3..=3) as f64).clamp(0.0, 64.0);
            let nb = BBox::new(j(b.x_min), j(b.y_min), j(b.x_max), j(b.y_max));
            let nb = if nb.x_max > nb.x_min && nb.y_max > nb.y_min { nb } else { b };
            let cat = if rng.gen_bool(0.85) { src.category_id } else { rng.gen_range(1..=3) };
            (cat, nb)
        } else {
            (rng.gen_range(1..=3), rand_box(&mut rng))
        };
        let score = rng.gen_range(0..8) as f64 / 8.0 + 0.01;
        p.pages[im].instances.push(Instance::from_box(cat, b).with_score(score));
    }
    (p, g)
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let u = a.area() + b.area() - inter;
    if u <= 0.0 {
        0.0
    } else {
        inter / u
    }
}

/// Box-mode mAP by explicit PR-curve construction: detections are ranked
/// globally, each rank's precision/recall point is recorded, and the
/// interpolated precision at recall level r is the maximum precision among
/// points with recall ≥ r.
pub fn oracle_box_map(p: &Dataset, g: &Dataset, thresholds: &[f64]) -> f64 {
    let mut per_cat = Vec::new();
    for c in 1..=3u32 {
        let n_gt: usize = g.pages.iter().map(|pg| pg.instances.iter().filter(|i| i.category_id == c).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut ap_sum = 0.0;
        for &t in thresholds {
            // per-image greedy matching, ranking within the image by score then index
            let mut ranked: Vec<(f64, u64, usize, bool)> = Vec::new();
            for pg in &p.pages {
                let gts: Vec<BBox> = g
                    .page(pg.image_id)
                    .map(|x| x.instances.iter().filter(|i| i.category_id == c).map(|i| i.bbox.unwrap()).collect())
                    .unwrap_or_default();
                let mut dets: Vec<(usize, &Instance)> = pg.instances.iter().enumerate().filter(|(_, i)| i.category_id == c).collect();
                dets.sort_by(|a, b| b.1.score.unwrap().partial_cmp(&a.1.score.unwrap()).unwrap().then(a.0.cmp(&b.0)));
                let mut used = vec![false; gts.len()];
                for (idx, d) in dets {
                    let db = d.bbox.unwrap();
                    let mut best: Option<(usize, f64)> = None;
                    for (k, gb) in gts.iter().enumerate() {
                        let v = box_iou(&db, gb);
                        if !used[k] && v >= t && best.is_none_or(|(_, bv)| v >= bv) {
                            best = Some((k, v));
                        }
                    }
                    if let Some((k, _)) = best {
                        used[k] = true;
                    }
                    ranked.push((d.score.unwrap(), pg.image_id, idx, best.is_some()));
                }
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
            let mut points = Vec::new();
            let mut tp = 0;
            for (rank, r) in ranked.iter().enumerate() {
                if r.3 {
                    tp += 1;
                }
                points.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
            }
            let mut ap = 0.0;
            for k in 0..=100 {
                let r = k as f64 / 100.0;
                let best = points.iter().filter(|(rc, _)| *rc >= r).map(|(_, pr)| *pr).fold(0.0, f64::max);
                ap += best;
            }
            ap_sum += ap / 101.0;
        }
        per_cat.push(ap_sum / thresholds.len() as f64);
    }
    if per_cat.is_empty() {
        f64::NAN
    } else {
        per_cat.iter().sum::<f64>() / per_cat.len() as f64
    }
}

/// Pinned digests of the shipped mapping tables.
pub const MAP_SHA256: [(&str, &str); 4] = [
    ("m6doc_to_docbank", "b2509aff437f68bf5115f62a6420772a46301f0c92b44387130c2ebd37427fcb"),
    ("m6doc_to_doclaynet", "070337bbe4055e3522ead365552a9a79cdbe6b7a3bbedc687d6b3a491411f962"),
    ("m6doc_to_publaynet", "a56dad001cd2c33b150c2505d028975ac4f4a5301990b2691c5d3908034c88c8"),
    ("note_v1_to_v2", "1be8c2dcfa956a2ec19999265df34b982e08d221da5c8e00ae50b06d3058b502"),
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
