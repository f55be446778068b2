//! Set-prediction loss with per-iteration bipartite matching.

use tdla_core::assignment::{cxcywh_to_xyxy, hungarian, matching_cost, Assignment, CostWeights, GtTargets, PredSlice};
use tdla_core::geometry::box_from_mask;
use tdla_core::{BBox, PageRecord};

use crate::codec::{crop_patch, MaskCodec};
use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::model::{IterVars, ModelOutput};
use crate::tensor::{c as tensor_c, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Term weights, shared with the matching cost.
    pub weights: CostWeights,
    /// Cross-entropy weight of queries supervised to background.
    pub background_weight: f64,
    /// Focusing exponent; `None` for plain cross-entropy.
    pub focal_gamma: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: CostWeights::default(), background_weight: 0.1, focal_gamma: None }
    }
}

/// Unweighted terms averaged over iterations, and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.class, self.l1, self.giou, self.mask].iter().all(|v| v.is_finite())
    }
}

/// Normalized box, class column (`1 + index` into `class_ids`) and mask
/// embedding for every instance of `page`.
pub fn encode_targets(page: &PageRecord, class_ids: &[u32], codec: &MaskCodec) -> Result<GtTargets> {
    let (w, h) = (page.width as f64, page.height as f64);
    let mut t = GtTargets { embed_dim: codec.dim, ..Default::default() };
    for inst in &page.instances {
        let col = class_ids
            .iter()
            .position(|&c| c == inst.category_id)
            .ok_or_else(|| NetError::Shape(format!("category {} has no class column", inst.category_id)))?;
        let b = match (&inst.bbox, &inst.mask) {
            (Some(b), _) => *b,
            (None, Some(m)) => box_from_mask(m, page.width, page.height)?,
            (None, None) => return Err(NetError::Shape("instance without box or mask".into())),
        };
        let patch = match &inst.mask {
            Some(m) => crop_patch(&m.rasterize(page.width, page.height), &b, codec.m),
            None => vec![1.0; codec.pixels()],
        };
        t.labels.push(col + 1);
        t.boxes.push([(b.x_min + b.x_max) / 2.0 / w, (b.y_min + b.y_max) / 2.0 / h, b.width() / w, b.height() / h]);
        t.embeddings.extend(codec.encode(&patch));
    }
    Ok(t)
}

pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

/// Optimal assignment of one iteration's predictions to the targets.
pub fn match_iteration(
    logits: &[f64],
    boxes: &[f64],
    embeddings: &[f64],
    gt: &GtTargets,
    num_classes: usize,
    w: &CostWeights,
) -> Result<Assignment> {
    let probs = softmax_rows(logits, num_classes + 1);
    let pred = PredSlice { probs: &probs, boxes, embeddings, num_classes, embed_dim: gt.embed_dim };
    Ok(hungarian(&matching_cost(&pred, gt, w)?))
}

fn corners<T: Scalar>(g: &mut Graph<T>, b: Var) -> [Var; 4] {
    let cx = g.slice_cols(b, 0, 1);
    let cy = g.slice_cols(b, 1, 1);
    let w = g.slice_cols(b, 2, 1);
    let h = g.slice_cols(b, 3, 1);
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    [g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh)]
}

/// Column of `giou` values between matching rows of two `[M, 4]` box sets.
pub fn giou_rows<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let [ax0, ay0, ax1, ay1] = corners(g, a);
    let [bx0, by0, bx1, by1] = corners(g, b);
    let area = |g: &mut Graph<T>, x0: Var, y0: Var, x1: Var, y1: Var| {
        let w = g.sub(x1, x0);
        let h = g.sub(y1, y0);
        g.mul(w, h)
    };
    let aa = area(g, ax0, ay0, ax1, ay1);
    let ab = area(g, bx0, by0, bx1, by1);
    let ix0 = g.max(ax0, bx0);
    let iy0 = g.max(ay0, by0);
    let ix1 = g.min(ax1, bx1);
    let iy1 = g.min(ay1, by1);
    let iw = g.sub(ix1, ix0);
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let sum = g.add(aa, ab);
    let union = g.sub(sum, inter);
    let iou = g.div(inter, union);
    let hx0 = g.min(ax0, bx0);
    let hy0 = g.min(ay0, by0);
    let hx1 = g.max(ax1, bx1);
    let hy1 = g.max(ay1, by1);
    let hull = area(g, hx0, hy0, hx1, hy1);
    let gap = g.sub(hull, union);
    let frac = g.div(gap, hull);
    g.sub(iou, frac)
}

fn class_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], weights: &[f64], gamma: Option<f64>) -> Var {
    let n = targets.len();
    let cols = g.shape(logits)[1];
    let lp = g.log_softmax_rows(logits);
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * cols + t).collect();
    let picked = g.pick(lp, &idx);
    let picked = g.reshape(picked, vec![n, 1]);
    let per = match gamma {
        None => picked,
        Some(gm) => {
            // (1 - p)^γ · log p
            let p = g.exp(picked);
            let np = g.scale(p, -1.0);
            let q = g.add_scalar(np, 1.0);
            let q = g.clamp(q, 1e-12, 1.0);
            let lq = g.log(q);
            let lq = g.scale(lq, gm);
            let f = g.exp(lq);
            g.mul(f, picked)
        }
    };
    let wsum: f64 = weights.iter().sum();
    let wt = g.constant(Tensor::new(vec![n, 1], weights.iter().map(|&w| tensor_c::<T>(-w / wsum)).collect()));
    let s = g.mul(per, wt);
    g.sum(s)
}

/// Loss recorded on `g`. Matching runs on current values unless
/// `fixed` supplies one assignment per iteration.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    iters: &[IterVars],
    gt: &GtTargets,
    cfg: &LossConfig,
    fixed: Option<&[Assignment]>,
) -> Result<(Var, LossBreakdown, Vec<Assignment>)> {
    let k = iters.len();
    let w = &cfg.weights;
    let m = gt.len();
    let d = gt.embed_dim;
    let mut terms = Vec::with_capacity(k);
    let mut br = LossBreakdown::default();
    let mut assignments = Vec::with_capacity(k);
    for (it, v) in iters.iter().enumerate() {
        let logits = g.value(v.logits).to_f64();
        let n = g.shape(v.logits)[0];
        let c1 = g.shape(v.logits)[1];
        if g.shape(v.masks)[1] != d {
            return Err(NetError::Shape(format!("mask embeddings of width {} vs targets {d}", g.shape(v.masks)[1])));
        }
        let a = match fixed {
            Some(f) => f[it].clone(),
            None => match_iteration(&logits, &g.value(v.boxes).to_f64(), &g.value(v.masks).to_f64(), gt, c1 - 1, w)?,
        };
        let mut targets = vec![0usize; n];
        let mut cw = vec![cfg.background_weight; n];
        for &(p, j) in &a.pairs {
            targets[p] = gt.labels[j];
            cw[p] = 1.0;
        }
        let ce = class_loss(g, v.logits, &targets, &cw, cfg.focal_gamma);
        let mut term = g.scale(ce, w.class);
        br.class += g.scalar(ce).to_f64().unwrap();
        if !a.pairs.is_empty() {
            let pi: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
            let norm = 1.0 / m.max(1) as f64;
            let pb = g.select_rows(v.boxes, &pi);
            let gb = g.constant(Tensor::new(vec![pi.len(), 4], a.pairs.iter().flat_map(|p| gt.boxes[p.1]).map(tensor_c::<T>).collect()));
            let diff = g.sub(pb, gb);
            let ad = g.abs(diff);
            let l1 = g.sum(ad);
            let l1 = g.scale(l1, norm);
            let gi = giou_rows(g, pb, gb);
            let gs = g.sum(gi);
            // mean of 1 - giou over the matched pairs
            let gl = g.scale(gs, -norm);
            let gl = g.add_scalar(gl, pi.len() as f64 * norm);
            let pe = g.select_rows(v.masks, &pi);
            let ge = g.constant(Tensor::new(
                vec![pi.len(), d],
                a.pairs.iter().flat_map(|p| gt.embeddings[p.1 * d..(p.1 + 1) * d].iter().copied()).map(tensor_c::<T>).collect(),
            ));
            let ed = g.sub(pe, ge);
            let sq = g.mul(ed, ed);
            let ml = g.sum(sq);
            let ml = g.scale(ml, norm / d.max(1) as f64);
            br.l1 += g.scalar(l1).to_f64().unwrap();
            br.giou += g.scalar(gl).to_f64().unwrap();
            br.mask += g.scalar(ml).to_f64().unwrap();
            for (t, wt) in [(l1, w.l1), (gl, w.giou), (ml, w.mask)] {
                let s = g.scale(t, wt);
                term = g.add(term, s);
            }
        }
        terms.push(term);
        assignments.push(a);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let total = g.scale(total, 1.0 / k as f64);
    let kf = k as f64;
    br.class /= kf;
    br.l1 /= kf;
    br.giou /= kf;
    br.mask /= kf;
    br.total = g.scalar(total).to_f64().unwrap();
    Ok((total, br, assignments))
}

/// Loss of fixed outputs against targets.
pub fn compute_loss<T: Scalar>(out: &ModelOutput<T>, gt: &GtTargets, cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut g = Graph::<T>::new();
    let iters: Vec<IterVars> = out
        .iterations
        .iter()
        .map(|it| IterVars {
            logits: g.constant(it.class_logits.clone()),
            boxes: g.constant(it.boxes.clone()),
            masks: g.constant(it.mask_embeddings.clone()),
        })
        .collect();
    Ok(loss_graph(&mut g, &iters, gt, cfg, None)?.1)
}

/// Pixel box of a normalized `cx, cy, w, h` row.
pub fn denormalize(b: &[f64], width: u32, height: u32) -> BBox {
    cxcywh_to_xyxy(b).scale(width as f64, height as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::IterationOutput;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tdla_core::geometry::giou;

    fn rand_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
        let w = rng.gen_range(0.1..0.5);
        let h = rng.gen_range(0.1..0.5);
        [rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h]
    }

    fn case(seed: u64, n: usize, m: usize, c: usize, d: usize, k: usize) -> (ModelOutput<f64>, GtTargets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = GtTargets {
            labels: (0..m).map(|_| rng.gen_range(1..=c)).collect(),
            boxes: (0..m).map(|_| rand_box(&mut rng)).collect(),
            embeddings: (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            embed_dim: d,
        };
        let iterations = (0..k)
            .map(|_| IterationOutput {
                class_logits: Tensor::new(vec![n, c + 1], (0..n * (c + 1)).map(|_| rng.gen_range(-2.0..2.0)).collect()),
                boxes: Tensor::new(vec![n, 4], (0..n).flat_map(|_| rand_box(&mut rng)).collect()),
                mask_embeddings: Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            })
            .collect();
        (ModelOutput { iterations }, gt)
    }

    /// Hand-assembled loss under brute-force optimal matching.
    fn oracle(out: &ModelOutput<f64>, gt: &GtTargets, cfg: &LossConfig) -> f64 {
        let w = cfg.weights;
        let d = gt.embed_dim;
        let mut total = 0.0;
        for it in &out.iterations {
            let n = it.boxes.rows();
            let c1 = it.class_logits.cols();
            let probs = softmax_rows(&it.class_logits.data, c1);
            let cost = |i: usize, j: usize| {
                let pb = &it.boxes.data[i * 4..i * 4 + 4];
                let l1: f64 = (0..4).map(|q| (pb[q] - gt.boxes[j][q]).abs()).sum();
                let gi = giou(&cxcywh_to_xyxy(pb), &cxcywh_to_xyxy(&gt.boxes[j]));
                let me: f64 =
                    (0..d).map(|q| (it.mask_embeddings.data[i * d + q] - gt.embeddings[j * d + q]).powi(2)).sum::<f64>() / d as f64;
                (-w.class * probs[i * c1 + gt.labels[j]] + w.l1 * l1 + w.giou * (1.0 - gi) + w.mask * me, l1, 1.0 - gi, me)
            };
            // all injective maps gt -> queries
            let m = gt.len();
            let mut best: Option<(f64, Vec<usize>)> = None;
            let mut stack = vec![(Vec::<usize>::new(), 0.0)];
            while let Some((sel, c)) = stack.pop() {
                if sel.len() == m {
                    if best.as_ref().is_none_or(|b| c < b.0) {
                        best = Some((c, sel));
                    }
                    continue;
                }
                for i in 0..n {
                    if !sel.contains(&i) {
                        let mut s = sel.clone();
                        s.push(i);
                        stack.push((s, c + cost(i, sel.len()).0));
                    }
                }
            }
            let sel = best.map(|b| b.1).unwrap_or_default();
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                let (t, wt) = match sel.iter().position(|&q| q == i) {
                    Some(j) => (gt.labels[j], 1.0),
                    None => (0, cfg.background_weight),
                };
                let row = &it.class_logits.data[i * c1..(i + 1) * c1];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                num += wt * (lse - row[t]);
                den += wt;
            }
            let mut l = w.class * num / den;
            let mm = m.max(1) as f64;
            for (j, &i) in sel.iter().enumerate() {
                let (_, l1, gl, me) = cost(i, j);
                l += (w.l1 * l1 + w.giou * gl + w.mask * me) / mm;
            }
            total += l;
        }
        total / out.iterations.len() as f64
    }

    #[test]
    fn matches_brute_force_oracle() {
        let cfg = LossConfig::default();
        for seed in 0..50 {
            let (out, gt) = case(seed, 3, 2, 3, 4, 2);
            let got = compute_loss(&out, &gt, &cfg).unwrap().total;
            let want = oracle(&out, &gt, &cfg);
            assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn perfect_outputs_zero_geometry() {
        let (mut out, gt) = case(3, 4, 2, 3, 5, 1);
        let it = &mut out.iterations[0];
        for (j, b) in gt.boxes.iter().enumerate() {
            it.boxes.data[j * 4..j * 4 + 4].copy_from_slice(b);
            it.mask_embeddings.data[j * 5..j * 5 + 5].copy_from_slice(&gt.embeddings[j * 5..j * 5 + 5]);
            for c in 0..4 {
                it.class_logits.data[j * 4 + c] = if c == gt.labels[j] { 30.0 } else { -30.0 };
            }
        }
        for j in 2..4 {
            for c in 0..4 {
                it.class_logits.data[j * 4 + c] = if c == 0 { 30.0 } else { -30.0 };
            }
        }
        let br = compute_loss(&out, &gt, &LossConfig::default()).unwrap();
        assert!(br.l1.abs() < 1e-12 && br.giou.abs() < 1e-12 && br.mask.abs() < 1e-12);
        assert!(br.total < 1e-10 && br.total >= 0.0);
    }

    #[test]
    fn empty_targets_background_only() {
        let (out, mut gt) = case(4, 5, 2, 3, 4, 2);
        gt.labels.clear();
        gt.boxes.clear();
        gt.embeddings.clear();
        let br = compute_loss(&out, &gt, &LossConfig::default()).unwrap();
        assert_eq!((br.l1, br.giou, br.mask), (0.0, 0.0, 0.0));
        assert!((br.total - 2.0 * br.class).abs() < 1e-12);
        let bg: f64 = out
            .iterations
            .iter()
            .map(|it| {
                (0..5)
                    .map(|i| {
                        let r = it.class_logits.row(i);
                        r.iter().map(|v| v.exp()).sum::<f64>().ln() - r[0]
                    })
                    .sum::<f64>()
                    / 5.0
            })
            .sum::<f64>()
            / 2.0;
        assert!((br.class - bg).abs() < 1e-12);
    }

    #[test]
    fn query_shuffle_invariance() {
        let cfg = LossConfig::default();
        for seed in 10..30 {
            let (out, gt) = case(seed, 8, 3, 4, 6, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuf = |t: &Tensor<f64>| Tensor::new(t.shape.clone(), perm.iter().flat_map(|&i| t.row(i).to_vec()).collect());
            let p = ModelOutput {
                iterations: out
                    .iterations
                    .iter()
                    .map(|it| IterationOutput {
                        class_logits: shuf(&it.class_logits),
                        boxes: shuf(&it.boxes),
                        mask_embeddings: shuf(&it.mask_embeddings),
                    })
                    .collect(),
            };
            let a = compute_loss(&out, &gt, &cfg).unwrap().total;
            let b = compute_loss(&p, &gt, &cfg).unwrap().total;
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn giou_rows_matches_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<[f64; 4]> = (0..10).map(|_| rand_box(&mut rng)).collect();
        let b: Vec<[f64; 4]> = (0..10).map(|_| rand_box(&mut rng)).collect();
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::new(vec![10, 4], a.concat()));
        let vb = g.constant(Tensor::new(vec![10, 4], b.concat()));
        let r = giou_rows(&mut g, va, vb);
        for i in 0..10 {
            let want = giou(&cxcywh_to_xyxy(&a[i]), &cxcywh_to_xyxy(&b[i]));
            assert!((g.value(r).data[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_option_is_finite_and_smaller() {
        let (out, gt) = case(5, 4, 2, 3, 4, 1);
        let ce = compute_loss(&out, &gt, &LossConfig::default()).unwrap();
        let fo = compute_loss(&out, &gt, &LossConfig { focal_gamma: Some(2.0), ..Default::default() }).unwrap();
        assert!(fo.is_finite() && fo.class < ce.class);
    }
}
