//! Page-level stratified train/val/test split.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| Error::Format(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub map: BTreeMap<u64, Split>,
}

impl SplitAssignment {
    pub fn get(&self, image_id: u64) -> Option<Split> {
        self.map.get(&image_id).copied()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for s in self.map.values() {
            out[s.index()] += 1;
        }
        out
    }

    /// Manifest text: one `image_id<TAB>split` line per page, sorted by id.
    pub fn to_manifest(&self) -> String {
        self.map.iter().map(|(id, s)| format!("{id}\t{s}\n")).collect()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (id, s) = line.split_once('\t').ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            let id = id.parse().map_err(|_| Error::Format(format!("bad image id {id:?}")))?;
            map.insert(id, s.parse()?);
        }
        Ok(Self { map })
    }

    /// The pages of `d` assigned to `s`, in dataset order.
    pub fn subset(&self, d: &Dataset, s: Split) -> Dataset {
        Dataset { taxonomy: d.taxonomy.clone(), pages: d.pages.iter().filter(|p| self.get(p.image_id) == Some(s)).cloned().collect() }
    }
}

/// Page counts per split by largest remainder; they sum to `n`.
fn page_targets(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut out = [0usize; 3];
    for k in 0..3 {
        out[k] = exact[k].floor() as usize;
    }
    let mut rest = n - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[k] += 1;
        rest -= 1;
    }
    out
}

/// Greedy largest-remaining-demand assignment of pages to splits.
///
/// Pages holding rare categories are placed first. Each page goes to the
/// split with free page capacity whose unmet fraction of per-category
/// instance targets, weighted by the page's histogram, is largest. Ties keep the
/// seeded shuffle order. A swap-based local search then tightens the
/// shares. Split sizes equal the largest-remainder targets.
pub fn stratified_split(d: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Infeasible(format!("ratios {ratios:?} must be non-negative with a positive total")));
    }
    if d.pages.len() < 10 {
        return Err(Error::Infeasible(format!("need at least 10 pages, got {}", d.pages.len())));
    }
    let rsum: f64 = ratios.iter().sum();
    let frac = ratios.map(|r| r / rsum);
    let caps = page_targets(d.pages.len(), ratios);

    let cat_pos: HashMap<u32, usize> = d.taxonomy.categories.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let k = d.taxonomy.len();
    let hist: Vec<Vec<(usize, f64)>> = d
        .pages
        .iter()
        .map(|p| {
            let mut h: BTreeMap<usize, f64> = BTreeMap::new();
            for inst in &p.instances {
                if let Some(&c) = cat_pos.get(&inst.category_id) {
                    *h.entry(c).or_default() += 1.0;
                }
            }
            h.into_iter().collect()
        })
        .collect();
    let mut totals = vec![0.0f64; k];
    for h in &hist {
        for &(c, n) in h {
            totals[c] += n;
        }
    }

    let mut order: Vec<usize> = (0..d.pages.len()).collect();
    order.sort_by_key(|&i| d.pages[i].image_id);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rarity = |i: usize| hist[i].iter().map(|&(c, _)| totals[c]).fold(f64::INFINITY, f64::min);
    let size = |i: usize| hist[i].iter().map(|&(_, n)| n).sum::<f64>();
    order.sort_by(|&a, &b| rarity(a).total_cmp(&rarity(b)).then(size(b).total_cmp(&size(a))));

    let mut remaining: Vec<Vec<f64>> = (0..3).map(|s| totals.iter().map(|t| t * frac[s]).collect()).collect();
    let mut used = [0usize; 3];
    let mut assign = vec![0usize; d.pages.len()];
    for &i in &order {
        let open: Vec<usize> = (0..3).filter(|&s| used[s] < caps[s]).collect();
        // n-weighted fraction of each category's target still unmet in split s
        let score = |s: usize| -> f64 {
            let target = |c: usize| (totals[c] * frac[s]).max(1e-9);
            hist[i].iter().map(|&(c, n)| n * remaining[s][c] / target(c)).sum::<f64>()
        };
        let cap_left = |s: usize| (caps[s] - used[s]) as f64 / caps[s].max(1) as f64;
        let best = open
            .iter()
            .copied()
            .max_by(|&a, &b| {
                let sa = score(a);
                let sb = score(b);
                sa.total_cmp(&sb).then(cap_left(a).total_cmp(&cap_left(b))).then(b.cmp(&a))
            })
            .expect("capacity covers every page");
        used[best] += 1;
        for &(c, n) in &hist[i] {
            remaining[best][c] -= n;
        }
        assign[i] = best;
    }
    refine_by_swaps(&hist, &totals, &mut assign);
    let map = (0..d.pages.len()).map(|i| (d.pages[i].image_id, Split::ALL[assign[i]])).collect();
    Ok(SplitAssignment { map })
}

/// Squared share deviation of one split from the global shares.
fn split_cost(cnt: &[f64], tot: f64, global: &[f64]) -> f64 {
    if tot <= 0.0 {
        return global.iter().map(|g| g * g).sum();
    }
    cnt.iter().zip(global).map(|(c, g)| (c / tot - g).powi(2)).sum()
}

/// Page swaps between splits, accepted while they lower the summed squared
/// deviation of per-split category shares. Split sizes are unchanged.
fn refine_by_swaps(hist: &[Vec<(usize, f64)>], totals: &[f64], assign: &mut [usize]) {
    let k = totals.len();
    let all: f64 = totals.iter().sum();
    if all <= 0.0 {
        return;
    }
    let global: Vec<f64> = totals.iter().map(|t| t / all).collect();
    let mut cnt = vec![vec![0.0f64; k]; 3];
    let mut tot = [0.0f64; 3];
    for (i, h) in hist.iter().enumerate() {
        for &(c, n) in h {
            cnt[assign[i]][c] += n;
            tot[assign[i]] += n;
        }
    }
    let mut cost: Vec<f64> = (0..3).map(|s| split_cost(&cnt[s], tot[s], &global)).collect();
    let mut scratch = vec![0.0f64; k];
    for _pass in 0..50 {
        let mut improved = false;
        for a in 0..hist.len() {
            for b in a + 1..hist.len() {
                let (sa, sb) = (assign[a], assign[b]);
                if sa == sb {
                    continue;
                }
                // split sa loses a, gains b; split sb the reverse
                let na: f64 = hist[a].iter().map(|x| x.1).sum();
                let nb: f64 = hist[b].iter().map(|x| x.1).sum();
                let trial = |s: usize, out: &[(usize, f64)], inn: &[(usize, f64)], t: f64, scratch: &mut Vec<f64>| {
                    scratch.copy_from_slice(&cnt[s]);
                    for &(c, n) in out {
                        scratch[c] -= n;
                    }
                    for &(c, n) in inn {
                        scratch[c] += n;
                    }
                    split_cost(scratch, t, &global)
                };
                let ca = trial(sa, &hist[a], &hist[b], tot[sa] - na + nb, &mut scratch);
                let cb = trial(sb, &hist[b], &hist[a], tot[sb] - nb + na, &mut scratch);
                if ca + cb < cost[sa] + cost[sb] - 1e-12 {
                    for &(c, n) in &hist[a] {
                        cnt[sa][c] -= n;
                        cnt[sb][c] += n;
                    }
                    for &(c, n) in &hist[b] {
                        cnt[sb][c] -= n;
                        cnt[sa][c] += n;
                    }
                    tot[sa] += nb - na;
                    tot[sb] += na - nb;
                    cost[sa] = ca;
                    cost[sb] = cb;
                    assign.swap(a, b);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}
