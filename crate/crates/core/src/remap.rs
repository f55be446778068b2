//! Label remapping between taxonomies.
//!
//! Mapping files are line-oriented UTF-8: `source<TAB>target` or
//! `source<TAB>DROP`, `#` starts a comment line. A leading comment of the
//! form `# source=<id> target=<id>` names the two taxonomies.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::model::{Dataset, Taxonomy};
use crate::taxonomy::{self, data_lines};

pub(crate) const M6DOC_TO_DOCBANK: &str = include_str!("../data/m6doc_to_docbank.tsv");
pub(crate) const M6DOC_TO_DOCLAYNET: &str = include_str!("../data/m6doc_to_doclaynet.tsv");
pub(crate) const M6DOC_TO_PUBLAYNET: &str = include_str!("../data/m6doc_to_publaynet.tsv");
pub(crate) const NOTE_V1_TO_V2: &str = include_str!("../data/note_v1_to_v2.tsv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapAction {
    Map(String),
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapEntry {
    pub source_name: String,
    pub action: MapAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub source_taxonomy_id: String,
    pub target_taxonomy_id: String,
    pub entries: Vec<LabelMapEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinMap {
    M6docToDocbank,
    M6docToDoclaynet,
    M6docToPublaynet,
    NoteV1ToV2,
}

impl BuiltinMap {
    pub const ALL: [BuiltinMap; 4] =
        [BuiltinMap::M6docToDocbank, BuiltinMap::M6docToDoclaynet, BuiltinMap::M6docToPublaynet, BuiltinMap::NoteV1ToV2];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinMap::M6docToDocbank => "m6doc_to_docbank",
            BuiltinMap::M6docToDoclaynet => "m6doc_to_doclaynet",
            BuiltinMap::M6docToPublaynet => "m6doc_to_publaynet",
            BuiltinMap::NoteV1ToV2 => "note_v1_to_v2",
        }
    }

    /// Raw text of the shipped mapping file.
    pub fn data(self) -> &'static str {
        match self {
            BuiltinMap::M6docToDocbank => M6DOC_TO_DOCBANK,
            BuiltinMap::M6docToDoclaynet => M6DOC_TO_DOCLAYNET,
            BuiltinMap::M6docToPublaynet => M6DOC_TO_PUBLAYNET,
            BuiltinMap::NoteV1ToV2 => NOTE_V1_TO_V2,
        }
    }
}

impl std::str::FromStr for BuiltinMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BuiltinMap::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::UnknownMap(s.to_string()))
    }
}

pub fn builtin_map(name: &str) -> Result<LabelMap> {
    let which: BuiltinMap = name.parse()?;
    parse_map(which.data(), None, None)
}

/// Parse a mapping file. Taxonomy ids come from the header comment unless given.
pub fn parse_map(text: &str, source: Option<&str>, target: Option<&str>) -> Result<LabelMap> {
    let mut src = source.map(str::to_string);
    let mut tgt = target.map(str::to_string);
    for line in text.lines() {
        let Some(rest) = line.strip_prefix('#') else { continue };
        for tok in rest.split_whitespace() {
            if let Some(v) = tok.strip_prefix("source=") {
                src.get_or_insert_with(|| v.to_string());
            } else if let Some(v) = tok.strip_prefix("target=") {
                tgt.get_or_insert_with(|| v.to_string());
            }
        }
    }
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in data_lines(text).enumerate() {
        let (s, t) =
            line.split_once('\t').ok_or_else(|| Error::Mapping(format!("entry {}: expected source<TAB>target, got {line:?}", n + 1)))?;
        if !seen.insert(s.to_string()) {
            return Err(Error::Mapping(format!("duplicate source {s:?}")));
        }
        let action = if t == "DROP" { MapAction::Drop } else { MapAction::Map(t.to_string()) };
        entries.push(LabelMapEntry { source_name: s.to_string(), action });
    }
    Ok(LabelMap {
        source_taxonomy_id: src.ok_or_else(|| Error::Mapping("source taxonomy id not given".into()))?,
        target_taxonomy_id: tgt.ok_or_else(|| Error::Mapping("target taxonomy id not given".into()))?,
        entries,
    })
}

impl LabelMap {
    /// Every category maps to itself.
    pub fn identity(t: &Taxonomy) -> Self {
        Self {
            source_taxonomy_id: t.id.clone(),
            target_taxonomy_id: t.id.clone(),
            entries: t.names().map(|n| LabelMapEntry { source_name: n.to_string(), action: MapAction::Map(n.to_string()) }).collect(),
        }
    }

    pub fn lookup(&self, source_name: &str) -> Option<&MapAction> {
        self.entries.iter().find(|e| e.source_name == source_name).map(|e| &e.action)
    }

    /// Distinct target names in first-appearance order.
    pub fn target_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if let MapAction::Map(t) = &e.action {
                if !out.contains(&t.as_str()) {
                    out.push(t);
                }
            }
        }
        out
    }

    /// Target taxonomy: the builtin of that id if there is one, otherwise
    /// built from the distinct target names.
    pub fn target_taxonomy(&self) -> Taxonomy {
        taxonomy::builtin(&self.target_taxonomy_id).unwrap_or_else(|| Taxonomy::from_names(&self.target_taxonomy_id, &self.target_names()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# source={} target={}\n", self.source_taxonomy_id, self.target_taxonomy_id);
        for e in &self.entries {
            let t = match &e.action {
                MapAction::Map(t) => t.as_str(),
                MapAction::Drop => "DROP",
            };
            s.push_str(&format!("{}\t{}\n", e.source_name, t));
        }
        s
    }
}

/// Relabel or remove every instance; pages are kept even when emptied.
pub fn apply_map(d: &Dataset, m: &LabelMap) -> Result<Dataset> {
    if d.taxonomy.id != m.source_taxonomy_id {
        return Err(Error::TaxonomyMismatch(format!("dataset taxonomy {:?} but map source {:?}", d.taxonomy.id, m.source_taxonomy_id)));
    }
    let target = m.target_taxonomy();
    let mut table: HashMap<u32, Option<u32>> = HashMap::new();
    for c in &d.taxonomy.categories {
        let Some(action) = m.lookup(&c.name) else { continue };
        let mapped = match action {
            MapAction::Drop => None,
            MapAction::Map(t) => {
                Some(target.id_of(t).ok_or_else(|| Error::Mapping(format!("target {t:?} not in taxonomy {:?}", target.id)))?)
            }
        };
        table.insert(c.id, mapped);
    }
    let mut out = Dataset::new(target);
    for page in &d.pages {
        let mut p = page.clone();
        p.instances.clear();
        for inst in &page.instances {
            let mapped = table.get(&inst.category_id).ok_or_else(|| {
                Error::Mapping(format!(
                    "category {} ({:?}) has no entry",
                    inst.category_id,
                    d.taxonomy.name_of(inst.category_id).unwrap_or("?")
                ))
            })?;
            if let Some(id) = mapped {
                let mut i = inst.clone();
                i.category_id = *id;
                p.instances.push(i);
            }
        }
        out.pages.push(p);
    }
    Ok(out)
}

/// Restrict the taxonomy to categories that occur in `d`, renumbered
/// `1..=k` in order of their original ids.
pub fn compact(d: &Dataset) -> Dataset {
    let used: BTreeSet<u32> = d.pages.iter().flat_map(|p| p.instances.iter().map(|i| i.category_id)).collect();
    let names: Vec<&str> = used.iter().filter_map(|&id| d.taxonomy.name_of(id)).collect();
    let target = Taxonomy::from_names(&format!("{}-compact", d.taxonomy.id), &names);
    let table: HashMap<u32, u32> = used.iter().enumerate().map(|(k, &id)| (id, k as u32 + 1)).collect();
    let mut out = Dataset::new(target);
    for page in &d.pages {
        let mut p = page.clone();
        p.instances.iter_mut().for_each(|i| i.category_id = table[&i.category_id]);
        out.pages.push(p);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoverageReport {
    pub unmapped: Vec<String>,
    pub dropped: Vec<String>,
    pub mapped: Vec<(String, String)>,
    pub distinct_targets: BTreeSet<String>,
}

impl CoverageReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.mapped {
            s.push_str(&format!("mapped\t{a}\t{b}\n"));
        }
        for a in &self.dropped {
            s.push_str(&format!("dropped\t{a}\n"));
        }
        for a in &self.unmapped {
            s.push_str(&format!("unmapped\t{a}\n"));
        }
        s.push_str(&format!(
            "# {} mapped, {} dropped, {} unmapped, {} target categories\n",
            self.mapped.len(),
            self.dropped.len(),
            self.unmapped.len(),
            self.distinct_targets.len()
        ));
        s
    }
}

pub fn coverage_report(m: &LabelMap, t: &Taxonomy) -> CoverageReport {
    let mut r = CoverageReport::default();
    for name in t.names() {
        match m.lookup(name) {
            None => r.unmapped.push(name.to_string()),
            Some(MapAction::Drop) => r.dropped.push(name.to_string()),
            Some(MapAction::Map(tn)) => {
                r.mapped.push((name.to_string(), tn.clone()));
                r.distinct_targets.insert(tn.clone());
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, Instance, PageRecord};
    use crate::taxonomy::{m6doc, note_v1};

    #[test]
    fn compact_keeps_used_categories() {
        let mut d = Dataset::new(m6doc());
        let mut p = PageRecord::new(1, 100, 100);
        let fig = d.taxonomy.id_of("figure").unwrap();
        let par = d.taxonomy.id_of("paragraph").unwrap();
        p.instances.push(Instance::from_box(par, BBox::new(0.0, 0.0, 10.0, 10.0)));
        p.instances.push(Instance::from_box(fig, BBox::new(20.0, 20.0, 30.0, 30.0)));
        d.pages.push(p);
        let c = compact(&d);
        assert_eq!(c.taxonomy.names().collect::<Vec<_>>(), vec!["figure", "paragraph"]);
        assert_eq!(c.pages[0].instances.iter().map(|i| i.category_id).collect::<Vec<_>>(), vec![2, 1]);
        assert!(crate::model::validate_dataset(&c).is_empty());
    }

    fn action(m: &LabelMap, s: &str) -> MapAction {
        m.lookup(s).cloned().unwrap()
    }

    #[test]
    fn builtin_rows() {
        let db = builtin_map("m6doc_to_docbank").unwrap();
        assert_eq!(action(&db, "formula"), MapAction::Map("equation".into()));
        assert_eq!(action(&db, "QR code"), MapAction::Drop);
        let dl = builtin_map("m6doc_to_doclaynet").unwrap();
        assert_eq!(action(&dl, "marginal note"), MapAction::Map("Page-header".into()));
        assert_eq!(action(&dl, "headline"), MapAction::Map("Title".into()));
        assert_eq!(action(&db, "headline"), MapAction::Map("section".into()));
        let pb = builtin_map("m6doc_to_publaynet").unwrap();
        assert_eq!(action(&pb, "ordered list"), MapAction::Map("list".into()));
        let nv = builtin_map("note_v1_to_v2").unwrap();
        assert_eq!(action(&nv, "first-level title"), MapAction::Map("paragraph".into()));
        for dropped in ["bracket", "first-level question number", "second-level question number", "underscore"] {
            assert_eq!(action(&nv, dropped), MapAction::Drop);
        }
        assert!(matches!(builtin_map("m6doc_to_coco"), Err(Error::UnknownMap(_))));
    }

    #[test]
    fn coverage() {
        let t = m6doc();
        let r = coverage_report(&builtin_map("m6doc_to_docbank").unwrap(), &t);
        assert!(r.unmapped.is_empty());
        assert_eq!(r.mapped.len() + r.dropped.len(), 74);
        let empty = LabelMap { source_taxonomy_id: "m6doc".into(), target_taxonomy_id: "x".into(), entries: vec![] };
        assert_eq!(coverage_report(&empty, &t).unmapped.len(), 74);
        let r = coverage_report(&builtin_map("note_v1_to_v2").unwrap(), &note_v1());
        assert_eq!(r.distinct_targets.len(), 18);
    }

    fn page_with(names: &[&str]) -> Dataset {
        let t = m6doc();
        let mut p = PageRecord::new(1, 200, 200);
        for (i, n) in names.iter().enumerate() {
            let y = 10.0 * i as f64;
            p.instances.push(Instance::from_box(t.id_of(n).unwrap(), BBox::new(1.0, y, 100.0, y + 5.0)));
        }
        Dataset { taxonomy: t, pages: vec![p] }
    }

    #[test]
    fn apply_drops_and_keeps_page() {
        let d = page_with(&["QR code"]);
        let out = apply_map(&d, &builtin_map("m6doc_to_docbank").unwrap()).unwrap();
        assert_eq!(out.pages.len(), 1);
        assert_eq!(out.instance_count(), 0);
        assert_eq!(out.taxonomy.id, "docbank");
    }

    #[test]
    fn apply_identity_is_equal() {
        let d = page_with(&["paragraph", "figure", "table"]);
        let out = apply_map(&d, &LabelMap::identity(&d.taxonomy)).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn apply_mixed_page_publaynet() {
        let names = ["paragraph", "QR code", "figure", "ordered list", "bracket", "headline", "caption", "poem", "table", "barcode"];
        // hand lookup in the published PubLayNet table: QR code, bracket, poem, barcode are "-"
        let hand_survivors = 6;
        let d = page_with(&names);
        let out = apply_map(&d, &builtin_map("m6doc_to_publaynet").unwrap()).unwrap();
        assert_eq!(out.instance_count(), hand_survivors);
        for inst in &out.pages[0].instances {
            assert!(crate::taxonomy::PUBLAYNET_LABELS.contains(&out.taxonomy.name_of(inst.category_id).unwrap()));
        }
    }

    #[test]
    fn wrong_source_and_missing_entry() {
        let d = page_with(&["paragraph"]);
        assert!(matches!(apply_map(&d, &builtin_map("note_v1_to_v2").unwrap()), Err(Error::TaxonomyMismatch(_))));
        let partial = LabelMap {
            source_taxonomy_id: "m6doc".into(),
            target_taxonomy_id: "m6doc".into(),
            entries: vec![LabelMapEntry { source_name: "figure".into(), action: MapAction::Drop }],
        };
        assert!(matches!(apply_map(&d, &partial), Err(Error::Mapping(_))));
    }

    #[test]
    fn text_roundtrip() {
        for m in BuiltinMap::ALL {
            let map = builtin_map(m.name()).unwrap();
            assert_eq!(parse_map(&map.to_text(), None, None).unwrap(), map);
        }
    }
}
