//! Bipartite assignment between predictions and ground truths.

use crate::error::{Error, Result};
use crate::geometry::giou;
use crate::model::BBox;

/// Dense row-major costs; rows are predictions, columns ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "cost matrix shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.rows, self.cols, self.data.iter().map(|v| v * k).collect())
    }

    fn transposed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self::new(self.cols, self.rows, data)
    }
}

/// `(pred_index, gt_index)` pairs sorted by prediction index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, k)| c.get(r, k)).sum()
    }

    pub fn gt_for(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

/// Minimum-cost complete matching of size `min(rows, cols)`.
///
/// Shortest augmenting path with potentials, O(n²m) for n ≤ m.
pub fn hungarian(c: &CostMatrix) -> Assignment {
    if c.rows == 0 || c.cols == 0 {
        return Assignment::default();
    }
    if c.rows > c.cols {
        let t = hungarian(&c.transposed());
        let mut pairs: Vec<_> = t.pairs.into_iter().map(|(a, b)| (b, a)).collect();
        pairs.sort_unstable();
        return Assignment { pairs };
    }
    let (n, m) = (c.rows, c.cols);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // p[j] = row (1-based) matched to column j, 0 = free
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] > 0).map(|j| (p[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    Assignment { pairs }
}

/// Relative weights of the matching cost terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { class: 2.0, l1: 5.0, giou: 2.0, mask: 1.0 }
    }
}

impl CostWeights {
    pub fn scaled(self, k: f64) -> Self {
        Self { class: self.class * k, l1: self.l1 * k, giou: self.giou * k, mask: self.mask * k }
    }
}

/// Per-query predictions of one refinement iteration, values only.
///
/// Boxes are normalized `(cx, cy, w, h)`; `probs` rows sum to one over
/// `num_classes + 1` columns with column 0 the no-object class.
#[derive(Debug, Clone, Copy)]
pub struct PredSlice<'a> {
    pub probs: &'a [f64],
    pub boxes: &'a [f64],
    pub embeddings: &'a [f64],
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl PredSlice<'_> {
    pub fn len(&self) -> usize {
        self.boxes.len() / 4
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Encoded ground truths of one page.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtTargets {
    /// Class column per instance, in `1..=num_classes`.
    pub labels: Vec<usize>,
    /// Normalized `(cx, cy, w, h)`.
    pub boxes: Vec<[f64; 4]>,
    /// Row-major `M × D` mask embeddings.
    pub embeddings: Vec<f64>,
    pub embed_dim: usize,
}

impl GtTargets {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn cxcywh_to_xyxy(b: &[f64]) -> BBox {
    BBox::new(b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
}

/// `cost(i,j) = −λc·p_i(class_j) + λ1·‖b_i−b_j‖₁ + λg·(1−giou) + λm·‖e_i−e_j‖²/D`.
pub fn matching_cost(pred: &PredSlice<'_>, gt: &GtTargets, w: &CostWeights) -> Result<CostMatrix> {
    let n = pred.len();
    let m = gt.len();
    let c1 = pred.num_classes + 1;
    if pred.probs.len() != n * c1 {
        return Err(Error::DimensionMismatch(format!("probs has {} values for {n}×{c1}", pred.probs.len())));
    }
    if pred.embed_dim != gt.embed_dim
        || pred.embeddings.len() != n * pred.embed_dim
        || gt.embeddings.len() != m * gt.embed_dim
        || gt.boxes.len() != m
    {
        return Err(Error::DimensionMismatch(format!("embedding dims pred {} gt {}", pred.embed_dim, gt.embed_dim)));
    }
    if let Some(&l) = gt.labels.iter().find(|&&l| l == 0 || l >= c1) {
        return Err(Error::DimensionMismatch(format!("gt class {l} outside 1..={}", pred.num_classes)));
    }
    let d = pred.embed_dim.max(1) as f64;
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let pb = &pred.boxes[i * 4..i * 4 + 4];
        let pxy = cxcywh_to_xyxy(pb);
        let pe = &pred.embeddings[i * pred.embed_dim..(i + 1) * pred.embed_dim];
        for j in 0..m {
            let gb = &gt.boxes[j];
            let l1: f64 = (0..4).map(|k| (pb[k] - gb[k]).abs()).sum();
            let g = giou(&pxy, &cxcywh_to_xyxy(gb));
            let ge = &gt.embeddings[j * gt.embed_dim..(j + 1) * gt.embed_dim];
            let me: f64 = pe.iter().zip(ge).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d;
            let p = pred.probs[i * c1 + gt.labels[j]];
            data.push(-w.class * p + w.l1 * l1 + w.giou * (1.0 - g) + w.mask * me);
        }
    }
    Ok(CostMatrix::new(n, m, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(c: &CostMatrix) -> f64 {
        // enumerate injective maps from the smaller side into the larger
        let (small, large, t) = if c.rows() <= c.cols() { (c.rows(), c.cols(), false) } else { (c.cols(), c.rows(), true) };
        let mut best = f64::INFINITY;
        let mut used = vec![false; large];
        let mut chosen = Vec::with_capacity(small);
        fn rec(
            k: usize,
            small: usize,
            large: usize,
            t: bool,
            c: &CostMatrix,
            used: &mut Vec<bool>,
            chosen: &mut Vec<usize>,
            best: &mut f64,
        ) {
            if k == small {
                let s: f64 = if t {
                    let mut pairs: Vec<(usize, usize)> = chosen.iter().enumerate().map(|(j, &i)| (i, j)).collect();
                    pairs.sort_unstable();
                    pairs.iter().map(|&(i, j)| c.get(i, j)).sum()
                } else {
                    chosen.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum()
                };
                if s < *best {
                    *best = s;
                }
                return;
            }
            for x in 0..large {
                if !used[x] {
                    used[x] = true;
                    chosen.push(x);
                    rec(k + 1, small, large, t, c, used, chosen, best);
                    chosen.pop();
                    used[x] = false;
                }
            }
        }
        rec(0, small, large, t, c, &mut used, &mut chosen, &mut best);
        best
    }

    #[test]
    fn diagonal_zero() {
        let mut rows = vec![vec![5.0; 4]; 4];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 0.0;
        }
        let a = hungarian(&CostMatrix::from_rows(&rows));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]);
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost(&c), 2.0);
        assert_eq!(brute_force(&c), 2.0);
    }

    #[test]
    fn random_six_by_six_vs_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let data: Vec<f64> = (0..36).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = CostMatrix::new(6, 6, data);
            let a = hungarian(&c);
            assert_eq!(a.pairs.len(), 6);
            assert_eq!(a.cost(&c), brute_force(&c));
        }
    }

    #[test]
    fn rectangular_both_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (r, k) in [(3, 6), (6, 3), (1, 5), (5, 1), (4, 4)] {
            let data: Vec<f64> = (0..r * k).map(|_| rng.gen_range(0..20) as f64).collect();
            let c = CostMatrix::new(r, k, data);
            let a = hungarian(&c);
            assert_eq!(a.pairs.len(), r.min(k));
            let mut preds: Vec<_> = a.pairs.iter().map(|p| p.0).collect();
            let mut gts: Vec<_> = a.pairs.iter().map(|p| p.1).collect();
            preds.dedup();
            gts.sort_unstable();
            gts.dedup();
            assert_eq!(preds.len(), r.min(k));
            assert_eq!(gts.len(), r.min(k));
            assert_eq!(a.cost(&c), brute_force(&c));
        }
        assert!(hungarian(&CostMatrix::new(0, 3, vec![])).pairs.is_empty());
    }

    #[test]
    fn never_worse_than_sampled_permutations_n50() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50;
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let c = CostMatrix::new(n, n, data);
        let best = hungarian(&c).cost(&c);
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..200 {
            perm.shuffle(&mut rng);
            let s: f64 = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
            assert!(best <= s + 1e-9);
        }
    }

    fn single(gb: [f64; 4], p: f64, pe: &[f64], ge: &[f64]) -> (Vec<f64>, Vec<f64>, GtTargets) {
        let probs = vec![1.0 - p, p];
        let gt = GtTargets { labels: vec![1], boxes: vec![gb], embeddings: ge.to_vec(), embed_dim: ge.len() };
        (probs, pe.to_vec(), gt)
    }

    #[test]
    fn single_pair_hand_value() {
        let pb = [0.5, 0.5, 0.4, 0.4];
        let gb = [0.5, 0.6, 0.4, 0.4];
        let (probs, pe, gt) = single(gb, 0.8, &[1.0, 0.0], &[0.0, 0.0]);
        let pred = PredSlice { probs: &probs, boxes: &pb, embeddings: &pe, num_classes: 1, embed_dim: 2 };
        let c = matching_cost(&pred, &gt, &CostWeights::default()).unwrap();
        // boxes [0.3,0.3,0.7,0.7] vs [0.3,0.4,0.7,0.8]: inter 0.4*0.3=0.12, union 0.2, hull 0.4*0.5=0.2
        // giou = 0.6 - 0 = 0.6; l1 = 0.1; mask = 1/2
        let want = -2.0 * 0.8 + 5.0 * 0.1 + 2.0 * (1.0 - 0.6) + 1.0 * 0.5;
        assert!((c.get(0, 0) - want).abs() < 1e-12, "{} vs {want}", c.get(0, 0));
    }

    #[test]
    fn exact_predictions_minimize_rows_and_scale_invariance() {
        let boxes = [[0.2, 0.2, 0.2, 0.2], [0.7, 0.3, 0.3, 0.2], [0.5, 0.8, 0.6, 0.2]];
        let gt = GtTargets { labels: vec![1, 2, 1], boxes: boxes.to_vec(), embeddings: vec![0.1, -0.2, 0.5, 0.0, -0.3, 0.3], embed_dim: 2 };
        let mut probs = vec![0.0; 9];
        for (i, &l) in gt.labels.iter().enumerate() {
            probs[i * 3 + l] = 1.0;
        }
        let flat: Vec<f64> = boxes.iter().flatten().copied().collect();
        let pred = PredSlice { probs: &probs, boxes: &flat, embeddings: &gt.embeddings, num_classes: 2, embed_dim: 2 };
        let w = CostWeights { class: 1.0, l1: 1.0, giou: 1.0, mask: 1.0 };
        let c = matching_cost(&pred, &gt, &w).unwrap();
        for i in 0..3 {
            let row = c.row(i);
            let min = row.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(row[i], min);
        }
        let a = hungarian(&c);
        for k in [0.5, 3.0, 17.0] {
            let ck = matching_cost(&pred, &gt, &w.scaled(k)).unwrap();
            assert_eq!(hungarian(&ck), a);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let probs = vec![0.5, 0.5];
        let pb = [0.5, 0.5, 0.2, 0.2];
        let pred = PredSlice { probs: &probs, boxes: &pb, embeddings: &[0.0, 0.0, 0.0], num_classes: 1, embed_dim: 3 };
        let gt = GtTargets { labels: vec![1], boxes: vec![pb], embeddings: vec![0.0, 0.0], embed_dim: 2 };
        assert!(matches!(matching_cost(&pred, &gt, &CostWeights::default()), Err(Error::DimensionMismatch(_))));
    }
}
