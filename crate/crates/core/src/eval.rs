//! COCO-style detection and instance-segmentation evaluation.
//!
//! AP uses 101-point interpolation per category and IoU threshold, with
//! greedy score-descending matching inside each (image, category) cell.
//! At most `max_dets` detections per image and category are kept, as in
//! the reference COCO evaluator. AR is recall at `max_dets`, averaged over
//! thresholds and categories.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_from_mask, box_raster, iou, mask_iou};
use crate::mask::Bitmap;
use crate::model::{BBox, Dataset, Instance, PageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Boxes,
    Masks,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boxes" | "bbox" | "det" => Ok(EvalMode::Boxes),
            "masks" | "segm" | "seg" => Ok(EvalMode::Masks),
            _ => Err(Error::Format(format!("unknown eval mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        // (50 + 5i) / 100 so that 0.60 and friends are the nearest doubles
        Self { iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(), max_dets: 100 }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        let ordered = t.windows(2).all(|w| w[0] < w[1]);
        if t.is_empty() || !ordered || t[0] <= 0.0 || *t.last().unwrap() > 1.0 || self.max_dets == 0 {
            return Err(Error::Schema(format!("bad eval config {self:?}")));
        }
        Ok(())
    }

    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.iou_thresholds.iter().position(|x| (x - t).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category_id: u32,
    pub name: String,
    pub num_gt: usize,
    /// AP per threshold; `None` when the category has no ground truth.
    pub ap: Option<Vec<f64>>,
    /// Recall at `max_dets` per threshold; `None` without ground truth.
    pub recall: Option<Vec<f64>>,
}

impl CategoryResult {
    /// AP averaged over thresholds.
    pub fn mean_ap(&self) -> Option<f64> {
        self.ap.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Aggregates are `NaN` when no category has ground truth, and AP50/AP75
/// are `NaN` when the config lacks that threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EvalMode,
    pub taxonomy_id: String,
    pub config: EvalConfig,
    pub categories: Vec<CategoryResult>,
    #[serde(with = "nan_null")]
    pub map: f64,
    #[serde(with = "nan_null")]
    pub ap50: f64,
    #[serde(with = "nan_null")]
    pub ap75: f64,
    #[serde(with = "nan_null")]
    pub ar: f64,
}

/// JSON has no NaN; undefined aggregates are written as `null`.
mod nan_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl EvalResult {
    /// Named aggregate metrics followed by per-category mean AP.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("mAP".to_string(), self.map),
            ("AP50".to_string(), self.ap50),
            ("AP75".to_string(), self.ap75),
            ("AR".to_string(), self.ar),
        ];
        for c in &self.categories {
            if let Some(ap) = c.mean_ap() {
                out.push((format!("AP/{}", c.name), ap));
            }
        }
        out
    }
}

fn empty_box() -> BBox {
    BBox::new(0.0, 0.0, 0.0, 0.0)
}

enum Geom {
    Box(BBox),
    Mask(Bitmap),
}

fn geom(inst: &Instance, page: &PageRecord, mode: EvalMode) -> Geom {
    let (w, h) = (page.width, page.height);
    match mode {
        EvalMode::Boxes => Geom::Box(match (&inst.bbox, &inst.mask) {
            (Some(b), _) => *b,
            (None, Some(m)) => box_from_mask(m, w, h).unwrap_or_else(|_| empty_box()),
            (None, None) => empty_box(),
        }),
        EvalMode::Masks => Geom::Mask(match (&inst.mask, &inst.bbox) {
            (Some(m), _) => m.rasterize(w, h),
            (None, Some(b)) => box_raster(b, w, h),
            (None, None) => Bitmap::empty(w, h),
        }),
    }
}

fn overlap(a: &Geom, b: &Geom) -> f64 {
    match (a, b) {
        (Geom::Box(a), Geom::Box(b)) => iou(a, b),
        (Geom::Mask(a), Geom::Mask(b)) => mask_iou(a, b).unwrap_or(0.0),
        _ => unreachable!("mixed geometry"),
    }
}

/// Outcome of one kept detection: score, ordering key and per-threshold hit.
struct Scored {
    score: f64,
    key: (u64, usize),
    hit: Vec<bool>,
}

struct Cell {
    num_gt: usize,
    dets: Vec<Scored>,
}

fn match_cell(page: &PageRecord, gts: &[&Instance], dets: &mut Vec<(usize, &Instance, f64)>, cfg: &EvalConfig, mode: EvalMode) -> Cell {
    dets.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    dets.truncate(cfg.max_dets);
    let g: Vec<Geom> = gts.iter().map(|i| geom(i, page, mode)).collect();
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|(_, d, _)| {
            let dg = geom(d, page, mode);
            g.iter().map(|gg| overlap(&dg, gg)).collect()
        })
        .collect();
    let mut hits = vec![vec![false; cfg.iou_thresholds.len()]; dets.len()];
    for (ti, &t) in cfg.iou_thresholds.iter().enumerate() {
        let mut taken = vec![false; g.len()];
        for (di, row) in ious.iter().enumerate() {
            let mut best = None;
            let mut best_iou = t;
            for (gi, &v) in row.iter().enumerate() {
                if !taken[gi] && v >= best_iou {
                    best_iou = v;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                taken[gi] = true;
                hits[di][ti] = true;
            }
        }
    }
    let dets = dets.iter().zip(hits).map(|(&(idx, _, score), hit)| Scored { score, key: (page.image_id, idx), hit }).collect();
    Cell { num_gt: gts.len(), dets }
}

/// 101-point interpolated AP and final recall from score-sorted hits.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> (f64, f64) {
    if num_gt == 0 {
        return (0.0, 0.0);
    }
    let mut tp = 0usize;
    let mut rc = Vec::with_capacity(hits.len());
    let mut pr = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        rc.push(tp as f64 / num_gt as f64);
        pr.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = rc.partition_point(|&x| x < r);
        if idx < pr.len() {
            sum += pr[idx];
        }
    }
    (sum / 101.0, rc.last().copied().unwrap_or(0.0))
}

/// Score `preds` against `gts`. Predictions on unknown image ids are ignored.
pub fn evaluate(preds: &Dataset, gts: &Dataset, cfg: &EvalConfig, mode: EvalMode) -> Result<EvalResult> {
    cfg.check()?;
    if preds.taxonomy.id != gts.taxonomy.id || !preds.taxonomy.names().eq(gts.taxonomy.names()) {
        return Err(Error::TaxonomyMismatch(format!("predictions use {:?}, ground truth uses {:?}", preds.taxonomy.id, gts.taxonomy.id)));
    }
    let mut pred_pages: HashMap<u64, Vec<&PageRecord>> = HashMap::new();
    for p in &preds.pages {
        pred_pages.entry(p.image_id).or_default().push(p);
    }
    for p in &preds.pages {
        if let Some(i) = p.instances.iter().position(|i| i.score.is_none()) {
            return Err(Error::Schema(format!("prediction {i} on image {} has no score", p.image_id)));
        }
    }

    let cat_ids: Vec<u32> = gts.taxonomy.categories.iter().map(|c| c.id).collect();
    let cat_pos: HashMap<u32, usize> = cat_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut gt_pages: Vec<&PageRecord> = gts.pages.iter().collect();
    gt_pages.sort_by_key(|p| p.image_id);

    // (category position, cell) for every image
    let per_image: Vec<Vec<(usize, Cell)>> = gt_pages
        .par_iter()
        .map(|page| {
            let mut g: HashMap<usize, Vec<&Instance>> = HashMap::new();
            for inst in &page.instances {
                if let Some(&c) = cat_pos.get(&inst.category_id) {
                    g.entry(c).or_default().push(inst);
                }
            }
            let mut d: HashMap<usize, Vec<(usize, &Instance, f64)>> = HashMap::new();
            let mut idx = 0usize;
            for pp in pred_pages.get(&page.image_id).into_iter().flatten() {
                for inst in &pp.instances {
                    if let Some(&c) = cat_pos.get(&inst.category_id) {
                        d.entry(c).or_default().push((idx, inst, inst.score.unwrap()));
                    }
                    idx += 1;
                }
            }
            let mut cats: Vec<usize> = g.keys().chain(d.keys()).copied().collect();
            cats.sort_unstable();
            cats.dedup();
            cats.into_iter()
                .map(|c| {
                    let gl = g.get(&c).map(Vec::as_slice).unwrap_or(&[]);
                    let mut dl = d.remove(&c).unwrap_or_default();
                    (c, match_cell(page, gl, &mut dl, cfg, mode))
                })
                .collect()
        })
        .collect();

    let nt = cfg.iou_thresholds.len();
    let mut num_gt = vec![0usize; cat_ids.len()];
    let mut dets: Vec<Vec<Scored>> = (0..cat_ids.len()).map(|_| Vec::new()).collect();
    for cells in per_image {
        for (c, cell) in cells {
            num_gt[c] += cell.num_gt;
            dets[c].extend(cell.dets);
        }
    }

    let categories: Vec<CategoryResult> = gts
        .taxonomy
        .categories
        .iter()
        .enumerate()
        .map(|(c, cat)| {
            let mut ds = std::mem::take(&mut dets[c]);
            ds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.key.cmp(&b.key)));
            let (ap, recall) = if num_gt[c] == 0 {
                (None, None)
            } else {
                let (ap, rc): (Vec<f64>, Vec<f64>) = (0..nt)
                    .map(|t| {
                        let hits: Vec<bool> = ds.iter().map(|d| d.hit[t]).collect();
                        interpolated_ap(&hits, num_gt[c])
                    })
                    .unzip();
                (Some(ap), Some(rc))
            };
            CategoryResult { category_id: cat.id, name: cat.name.clone(), num_gt: num_gt[c], ap, recall }
        })
        .collect();

    let present: Vec<&CategoryResult> = categories.iter().filter(|c| c.ap.is_some()).collect();
    let mean = |f: &dyn Fn(&CategoryResult) -> f64| -> f64 {
        if present.is_empty() {
            f64::NAN
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    let at = |t: f64| match cfg.threshold_index(t) {
        Some(i) => mean(&|c| c.ap.as_ref().unwrap()[i]),
        None => f64::NAN,
    };
    let map = mean(&|c| c.mean_ap().unwrap());
    let ar = mean(&|c| c.recall.as_ref().unwrap().iter().sum::<f64>() / nt as f64);
    let (ap50, ap75) = (at(0.5), at(0.75));
    Ok(EvalResult { mode, taxonomy_id: gts.taxonomy.id.clone(), config: cfg.clone(), categories, map, ap50, ap75, ar })
}

/// Ground truth turned into scored predictions (score 1.0).
pub fn gt_as_predictions(gts: &Dataset) -> Dataset {
    let mut d = gts.clone();
    for p in &mut d.pages {
        for i in &mut p.instances {
            i.score = Some(1.0);
        }
    }
    d
}
