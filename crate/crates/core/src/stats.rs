//! Per-category instance tallies and shares.

use std::fmt::Write as _;

use crate::model::{Dataset, Taxonomy};
use crate::split::{Split, SplitAssignment};
use crate::taxonomy::data_lines;

const TABLE2: &str = include_str!("../data/table2_counts.tsv");

#[derive(Debug, Clone, PartialEq)]
pub struct SplitStats {
    pub name: String,
    /// Indexed like the taxonomy's categories.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl SplitStats {
    pub fn new(name: impl Into<String>, counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { name: name.into(), counts, total }
    }

    /// Percentage share of category position `i`; 0 for an empty split.
    pub fn share(&self, i: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts[i] as f64 / self.total as f64 * 100.0
        }
    }

    pub fn shares(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|i| self.share(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub category_names: Vec<String>,
    pub splits: Vec<SplitStats>,
}

impl DatasetStats {
    pub fn split(&self, name: &str) -> Option<&SplitStats> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.category_names.iter().position(|n| n == name)
    }

    /// Tab-separated table: one row per category, `count` and `%` per split.
    pub fn to_table(&self) -> String {
        let mut s = String::from("category");
        for sp in &self.splits {
            let _ = write!(s, "\t{}\t{}_%", sp.name, sp.name);
        }
        s.push('\n');
        for (i, name) in self.category_names.iter().enumerate() {
            s.push_str(name);
            for sp in &self.splits {
                let _ = write!(s, "\t{}\t{:.3}", sp.counts[i], sp.share(i));
            }
            s.push('\n');
        }
        s.push_str("Total");
        for sp in &self.splits {
            let pct = if sp.total == 0 { 0.0 } else { 100.0 };
            let _ = write!(s, "\t{}\t{:.3}", sp.total, pct);
        }
        s.push('\n');
        s
    }
}

fn tally<'a>(taxonomy: &Taxonomy, pages: impl Iterator<Item = &'a crate::model::PageRecord>) -> Vec<u64> {
    let mut counts = vec![0u64; taxonomy.len()];
    for p in pages {
        for inst in &p.instances {
            if let Some(pos) = taxonomy.categories.iter().position(|c| c.id == inst.category_id) {
                counts[pos] += 1;
            }
        }
    }
    counts
}

/// Exact tallies, either over the whole dataset (`"all"`) or per split.
pub fn dataset_stats(d: &Dataset, split: Option<&SplitAssignment>) -> DatasetStats {
    let category_names = d.taxonomy.names().map(str::to_string).collect();
    let splits = match split {
        None => vec![SplitStats::new("all", tally(&d.taxonomy, d.pages.iter()))],
        Some(a) => Split::ALL
            .iter()
            .map(|&s| {
                let pages = d.pages.iter().filter(|p| a.get(p.image_id) == Some(s));
                SplitStats::new(s.as_str(), tally(&d.taxonomy, pages))
            })
            .collect(),
    };
    DatasetStats { category_names, splits }
}

/// One row of the published per-split overview.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedRow {
    pub category: String,
    pub counts: [u64; 3],
    pub percents: [f64; 3],
}

/// Published per-split counts and shares for the 74 categories, plus the
/// printed per-split totals.
pub fn published_overview() -> (Vec<PublishedRow>, [u64; 3]) {
    let mut rows = Vec::new();
    let mut totals = [0u64; 3];
    for line in data_lines(TABLE2) {
        let f: Vec<&str> = line.split('\t').collect();
        let counts = [f[1].parse().unwrap(), f[3].parse().unwrap(), f[5].parse().unwrap()];
        if f[0] == "TOTAL" {
            totals = counts;
            continue;
        }
        rows.push(PublishedRow {
            category: f[0].to_string(),
            counts,
            percents: [f[2].parse().unwrap(), f[4].parse().unwrap(), f[6].parse().unwrap()],
        });
    }
    (rows, totals)
}

/// Stats built from the published counts, split names train/val/test.
pub fn published_stats() -> DatasetStats {
    let (rows, _) = published_overview();
    let category_names = rows.iter().map(|r| r.category.clone()).collect();
    let splits =
        Split::ALL.iter().enumerate().map(|(k, s)| SplitStats::new(s.as_str(), rows.iter().map(|r| r.counts[k]).collect())).collect();
    DatasetStats { category_names, splits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Instance, PageRecord};
    use crate::taxonomy::m6doc;

    #[test]
    fn paragraph_share() {
        let st = published_stats();
        let train = st.split("train").unwrap();
        let i = st.category_index("paragraph").unwrap();
        assert_eq!(train.counts[i], 65_642);
        assert_eq!(train.total, 143_040);
        assert!((train.share(i) - 45.891).abs() < 0.001);
    }

    #[test]
    fn published_totals_match_sums() {
        let (rows, totals) = published_overview();
        assert_eq!(rows.len(), 74);
        let st = published_stats();
        for (k, s) in st.splits.iter().enumerate() {
            assert_eq!(s.total, totals[k]);
            assert!((s.shares().iter().sum::<f64>() - 100.0).abs() < 0.01);
        }
    }

    fn ds(cats: &[u32]) -> Dataset {
        let mut d = Dataset::new(m6doc());
        let mut p = PageRecord::new(1, 100, 100);
        for &c in cats {
            p.instances.push(Instance::from_box(c, BBox::new(1.0, 1.0, 5.0, 5.0)));
        }
        d.pages.push(p);
        d
    }

    #[test]
    fn single_instance_is_100() {
        let st = dataset_stats(&ds(&[4]), None);
        assert_eq!(st.splits[0].share(3), 100.0);
    }

    #[test]
    fn one_and_three() {
        let st = dataset_stats(&ds(&[2, 5, 5, 5]), None);
        assert_eq!(st.splits[0].share(1), 25.0);
        assert_eq!(st.splits[0].share(4), 75.0);
        assert_eq!(st.splits[0].total, 4);
    }

    #[test]
    fn empty_is_zero_table() {
        let st = dataset_stats(&Dataset::new(m6doc()), None);
        assert_eq!(st.splits[0].total, 0);
        assert!(st.to_table().lines().last().unwrap().starts_with("Total\t0\t"));
    }
}
