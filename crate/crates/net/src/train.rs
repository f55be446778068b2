//! Training loop: per-image gradients, ordered batch reduction, AdamW with
//! a piecewise-constant schedule and a line-delimited metric log.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use tdla_core::assignment::{Assignment, CostWeights, GtTargets};
use tdla_core::eval::{evaluate, EvalConfig, EvalMode};
use tdla_core::synth::PageImage;
use tdla_core::{Dataset, PageRecord};

use crate::augment::{augment, AugmentConfig};
use crate::codec::{crop_patch, MaskCodec};
use crate::detector::Detector;
use crate::error::{NetError, Result};
use crate::graph::{BranchPattern, Graph};
use crate::loss::{encode_targets, loss_graph, LossBreakdown, LossConfig};
use crate::model::Model;
use crate::params::Binder;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Fractions of `epochs` at which the matching factor starts to apply.
    pub lr_milestones: Vec<f64>,
    pub lr_factors: Vec<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub loss_class: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub loss_mask: f64,
    pub background_weight: f64,
    /// Focal exponent; 0 selects plain cross-entropy.
    pub focal_gamma: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Evaluate on the training pages every this many epochs; 0 disables.
    pub eval_every: usize,
    pub workers: usize,
    /// Scale jitter and random crops per sample.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            base_lr: 2e-5,
            lr_milestones: vec![0.5, 0.75],
            lr_factors: vec![0.1, 0.01],
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            batch_size: 1,
            loss_class: 2.0,
            loss_l1: 5.0,
            loss_giou: 2.0,
            loss_mask: 1.0,
            background_weight: 0.1,
            focal_gamma: 0.0,
            grad_clip: 1.0,
            eval_every: 0,
            workers: 1,
            augment: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| NetError::ConfigKey { key: key.into(), msg: format!("cannot parse {v:?}") })
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

impl TrainConfig {
    /// Set one `key=value` entry. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "lr_milestones" => self.lr_milestones = parse_list(key, v)?,
            "lr_factors" => self.lr_factors = parse_list(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "loss_class" => self.loss_class = parse(key, v)?,
            "loss_l1" => self.loss_l1 = parse(key, v)?,
            "loss_giou" => self.loss_giou = parse(key, v)?,
            "loss_mask" => self.loss_mask = parse(key, v)?,
            "background_weight" => self.background_weight = parse(key, v)?,
            "focal_gamma" => self.focal_gamma = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            _ => return Err(NetError::ConfigKey { key: key.into(), msg: "unknown key".into() }),
        }
        Ok(())
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| NetError::ConfigKey { key: line.into(), msg: "expected key=value".into() })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).unwrap();
        let mut s = String::new();
        for (k, v) in v.as_object().unwrap() {
            let val = match v {
                serde_json::Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            writeln!(s, "{k} = {val}").unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(NetError::ConfigKey { key: k.into(), msg: m.into() });
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.lr_milestones.len() != self.lr_factors.len() {
            return bad("lr_factors", "needs one factor per milestone");
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones", "must be increasing");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr", "must be positive");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            weights: CostWeights { class: self.loss_class, l1: self.loss_l1, giou: self.loss_giou, mask: self.loss_mask },
            background_weight: self.background_weight,
            focal_gamma: (self.focal_gamma > 0.0).then_some(self.focal_gamma),
        }
    }
}

/// Learning rate for `epoch`: the factor of the last milestone reached.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let mut f = 1.0;
    for (m, k) in cfg.lr_milestones.iter().zip(&cfg.lr_factors) {
        if epoch as f64 >= m * cfg.epochs as f64 {
            f = *k;
        }
    }
    cfg.base_lr * f
}

/// Matching and detached refinement boxes of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub assignments: Vec<Assignment>,
    pub boxes: Vec<Vec<[f64; 4]>>,
    /// Piecewise-op branches; empty means decide from the values.
    pub branches: BranchPattern,
}

/// Loss and per-parameter gradients for one image. Unbound parameters get
/// zero gradients.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    image: &PageImage,
    gt: &GtTargets,
    cfg: &LossConfig,
    frozen: Option<&Frozen>,
) -> Result<(LossBreakdown, Vec<Tensor<T>>, Frozen)> {
    let mut g = Graph::replaying(frozen.map(|f| f.branches.clone()).unwrap_or_default());
    let mut b = Binder::new(&model.params);
    let (iters, boxes) = model.forward_graph_frozen(&mut g, &mut b, image, frozen.map(|f| f.boxes.as_slice()))?;
    let (total, br, assignments) = loss_graph(&mut g, &iters, gt, cfg, frozen.map(|f| f.assignments.as_slice()))?;
    g.backward(total);
    let mut grads: Vec<Tensor<T>> = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
    for (id, v) in b.bound() {
        if let Some(gr) = g.grad(v) {
            grads[id].data.copy_from_slice(gr);
        }
    }
    let branches = g.take_branches();
    Ok((br, grads, Frozen { assignments, boxes, branches }))
}

/// Loss only, optionally with matching, refinement boxes and branches frozen.
pub fn loss_value<T: Scalar>(
    model: &Model<T>,
    image: &PageImage,
    gt: &GtTargets,
    cfg: &LossConfig,
    frozen: Option<&Frozen>,
) -> Result<LossBreakdown> {
    let mut g = Graph::replaying(frozen.map(|f| f.branches.clone()).unwrap_or_default());
    let mut b = Binder::new(&model.params);
    let (iters, _) = model.forward_graph_frozen(&mut g, &mut b, image, frozen.map(|f| f.boxes.as_slice()))?;
    Ok(loss_graph(&mut g, &iters, gt, cfg, frozen.map(|f| f.assignments.as_slice()))?.1)
}

/// Fit the mask codec on box-cropped ground-truth masks.
pub fn fit_codec(pages: &[PageRecord], m: usize, dim: usize) -> Result<MaskCodec> {
    let mut patches = Vec::new();
    for p in pages {
        for inst in &p.instances {
            let (Some(b), Some(mask)) = (&inst.bbox, &inst.mask) else { continue };
            patches.push(crop_patch(&mask.rasterize(p.width, p.height), b, m));
        }
    }
    Ok(MaskCodec::fit(&patches, m, dim)?)
}

/// Fresh detector for `dataset`'s taxonomy with a codec fitted on its masks.
/// `cfg.num_classes` is overwritten with the taxonomy size.
pub fn init_detector(dataset: &Dataset, mut cfg: crate::config::ModelConfig, seed: u64) -> Result<Detector> {
    cfg.num_classes = dataset.taxonomy.len();
    let codec = fit_codec(&dataset.pages, cfg.mask_patch, cfg.mask_dim)?;
    Detector::new(crate::model::init_model(&cfg, seed)?, codec, dataset.taxonomy.clone())
}

/// Training pages with their rendered images.
pub struct TrainData {
    pub dataset: Dataset,
    pub images: Vec<PageImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSnapshot {
    pub det_map: f64,
    pub seg_map: f64,
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub log: Vec<LogRecord>,
    pub steps: usize,
}

struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    fn new(model: &Model<T>) -> Self {
        let z: Vec<Tensor<T>> = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape.clone())).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in model.params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for (j, w) in p.data.iter_mut().enumerate() {
                let g = grads[i].data[j].to_f64().unwrap();
                let mj = b1 * m[j].to_f64().unwrap() + (1.0 - b1) * g;
                let vj = b2 * v[j].to_f64().unwrap() + (1.0 - b2) * g * g;
                m[j] = crate::tensor::c(mj);
                v[j] = crate::tensor::c(vj);
                let wv = w.to_f64().unwrap();
                let upd = lr * ((mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps) + cfg.weight_decay * wv);
                *w = crate::tensor::c(wv - upd);
            }
        }
    }
}

/// Detection and segmentation mAP of `det` on `data`.
pub fn evaluate_detector(det: &Detector, data: &TrainData, workers: usize) -> Result<EvalSnapshot> {
    let preds = det.predict_dataset(&data.dataset.pages, &data.images, 0.0, 100, workers)?;
    let cfg = EvalConfig::default();
    let box_r = evaluate(&preds, &data.dataset, &cfg, EvalMode::Boxes)?;
    let seg_r = evaluate(&preds, &data.dataset, &cfg, EvalMode::Masks)?;
    Ok(EvalSnapshot { det_map: box_r.map, seg_map: seg_r.map })
}

/// Train `det` in place. One record per epoch goes to `log` as JSON.
///
/// Page order is reshuffled each epoch from `seed`; per-image gradients
/// are reduced in batch order, so results do not depend on `workers`.
pub fn train(mut det: Detector, data: &TrainData, cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.dataset.pages.is_empty() {
        return Err(NetError::InvalidConfig("training set is empty".into()));
    }
    if data.images.len() != data.dataset.pages.len() {
        return Err(NetError::Shape(format!("{} images for {} pages", data.images.len(), data.dataset.pages.len())));
    }
    let lcfg = cfg.loss();
    let targets: Vec<GtTargets> =
        data.dataset.pages.iter().map(|p| encode_targets(p, &det.class_ids, &det.codec)).collect::<Result<_>>()?;
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(cfg.workers.max(1)).build().map_err(|e| NetError::InvalidConfig(e.to_string()))?;
    let mut opt = AdamW::new(&det.model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.images.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let model = &det.model;
            let det_ref = &det;
            let sample = |i: usize| -> Result<(LossBreakdown, Vec<Tensor<f32>>, Frozen)> {
                if cfg.augment {
                    let seed = cfg.seed ^ ((epoch as u64) << 32) ^ i as u64;
                    let (p, img) = augment(&data.dataset.pages[i], &data.images[i], seed, &AugmentConfig::default());
                    let t = encode_targets(&p, &det_ref.class_ids, &det_ref.codec)?;
                    loss_and_grads(model, &img, &t, &lcfg, None)
                } else {
                    loss_and_grads(model, &data.images[i], &targets[i], &lcfg, None)
                }
            };
            let results: Vec<Result<(LossBreakdown, Vec<Tensor<f32>>, Frozen)>> =
                pool.install(|| batch.par_iter().map(|&i| sample(i)).collect());
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            let mut br = LossBreakdown::default();
            for r in results {
                let (b, g, _) = r?;
                if !b.is_finite() {
                    return Err(NetError::Divergence { step, detail: format!("{b:?}") });
                }
                br.total += b.total;
                br.class += b.class;
                br.l1 += b.l1;
                br.giou += b.giou;
                br.mask += b.mask;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y)),
                }
            }
            let mut grads = grads.unwrap();
            let inv = 1.0 / batch.len() as f64;
            let mut norm2 = 0.0;
            for t in &mut grads {
                for v in &mut t.data {
                    *v *= inv as f32;
                    norm2 += (*v as f64) * (*v as f64);
                }
            }
            if !norm2.is_finite() {
                return Err(NetError::Divergence { step, detail: "non-finite gradient".into() });
            }
            if cfg.grad_clip > 0.0 && norm2.sqrt() > cfg.grad_clip {
                let s = (cfg.grad_clip / norm2.sqrt()) as f32;
                grads.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v *= s));
            }
            opt.step(&mut det.model, &grads, lr, cfg);
            step += 1;
            let k = batch.len() as f64;
            sums.total += br.total / k;
            sums.class += br.class / k;
            sums.l1 += br.l1 / k;
            sums.giou += br.giou / k;
            sums.mask += br.mask / k;
            batches += 1;
        }
        let nb = batches as f64;
        let eval = if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            Some(evaluate_detector(&det, data, cfg.workers)?)
        } else {
            None
        };
        let rec = LogRecord {
            epoch,
            step,
            lr,
            loss: sums.total / nb,
            class: sums.class / nb,
            l1: sums.l1 / nb,
            giou: sums.giou / nb,
            mask: sums.mask / nb,
            eval,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec).unwrap()).map_err(|e| NetError::io("<metric log>", e))?;
        }
        records.push(rec);
    }
    Ok(TrainOutcome { detector: det, log: records, steps: step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let c = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-18;
        assert!(close(lr_at(&c, 0), 2e-5));
        assert!(close(lr_at(&c, 249), 2e-5));
        assert!(close(lr_at(&c, 250), 2e-6));
        assert!(close(lr_at(&c, 374), 2e-6));
        assert!(close(lr_at(&c, 375), 2e-7));
        assert!(close(lr_at(&c, 450), 2e-7));
    }

    #[test]
    fn text_roundtrip_and_errors() {
        let c = TrainConfig::parse_text("epochs = 12 # short\nbase_lr=1e-3\nlr_milestones = 0.4, 0.8\n").unwrap();
        assert_eq!((c.epochs, c.base_lr, c.lr_milestones.clone()), (12, 1e-3, vec![0.4, 0.8]));
        assert_eq!(TrainConfig::parse_text(&c.to_text()).unwrap(), c);
        assert!(matches!(TrainConfig::parse_text("bogus = 1"), Err(NetError::ConfigKey { .. })));
        assert!(TrainConfig::parse_text("epochs = x").is_err());
        assert!(TrainConfig::parse_text("lr_factors = 0.1").is_err());
    }
}
