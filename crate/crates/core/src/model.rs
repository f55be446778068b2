//! Shared domain types: boxes, categories, taxonomies, instances, pages.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::mask::InstanceMask;

/// Corner-form box in page pixels, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x_min.is_finite() && self.y_min.is_finite() && self.x_max.is_finite() && self.y_max.is_finite()
    }

    pub fn is_ordered(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    /// Smallest box containing both.
    pub fn union_hull(&self, o: &BBox) -> BBox {
        BBox::new(self.x_min.min(o.x_min), self.y_min.min(o.y_min), self.x_max.max(o.x_max), self.y_max.max(o.y_max))
    }

    /// True when `self` lies inside `outer` enlarged by `tol` on every side.
    pub fn within(&self, outer: &BBox, tol: f64) -> bool {
        self.x_min >= outer.x_min - tol
            && self.y_min >= outer.y_min - tol
            && self.x_max <= outer.x_max + tol
            && self.y_max <= outer.y_max + tol
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox::new(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub taxonomy_id: String,
}

/// An ordered category universe with ids `1..=len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    pub id: String,
    pub categories: Vec<Category>,
}

impl Taxonomy {
    /// Build with contiguous ids assigned in the given order.
    pub fn from_names<S: AsRef<str>>(id: &str, names: &[S]) -> Self {
        let categories = names
            .iter()
            .enumerate()
            .map(|(i, n)| Category { id: i as u32 + 1, name: n.as_ref().to_string(), taxonomy_id: id.to_string() })
            .collect();
        Self { id: id.to_string(), categories }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.get(id).is_some()
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.categories.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        self.get(id).map(|c| c.name.as_str())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(|c| c.name.as_str())
    }

    /// Structural problems: non-contiguous ids, duplicate names, foreign taxonomy ids.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut names = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.id != i as u32 + 1 {
                out.push(Violation::taxonomy(Rule::TaxonomyIds, format!("category {:?} has id {}, expected {}", c.name, c.id, i + 1)));
            }
            if !names.insert(c.name.as_str()) {
                out.push(Violation::taxonomy(Rule::TaxonomyDuplicateName, format!("name {:?} repeated", c.name)));
            }
            if c.taxonomy_id != self.id {
                out.push(Violation::taxonomy(
                    Rule::TaxonomyIds,
                    format!("category {:?} belongs to {:?}, not {:?}", c.name, c.taxonomy_id, self.id),
                ));
            }
        }
        out
    }
}

/// Document family of a page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    ScientificArticle,
    Textbook,
    TestPaper,
    MagazineCh,
    MagazineEn,
    NewspaperCh,
    NewspaperEn,
    Note,
    Book,
    Synthetic,
}

impl Subset {
    pub const ALL: [Subset; 10] = [
        Subset::ScientificArticle,
        Subset::Textbook,
        Subset::TestPaper,
        Subset::MagazineCh,
        Subset::MagazineEn,
        Subset::NewspaperCh,
        Subset::NewspaperEn,
        Subset::Note,
        Subset::Book,
        Subset::Synthetic,
    ];

    /// Coarse grouping where Chinese/English magazine and newspaper merge.
    pub fn group(self) -> &'static str {
        match self {
            Subset::ScientificArticle => "scientific_article",
            Subset::Textbook => "textbook",
            Subset::TestPaper => "test_paper",
            Subset::MagazineCh | Subset::MagazineEn => "magazine",
            Subset::NewspaperCh | Subset::NewspaperEn => "newspaper",
            Subset::Note => "note",
            Subset::Book => "book",
            Subset::Synthetic => "synthetic",
        }
    }
}

/// One annotated or predicted layout element.
///
/// Ground truth always carries a box; predictions may carry a box, a mask,
/// or both, and always carry a score.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category_id: u32,
    pub bbox: Option<BBox>,
    pub mask: Option<InstanceMask>,
    pub score: Option<f64>,
}

impl Instance {
    /// Ground-truth instance whose mask is its box polygon.
    pub fn from_box(category_id: u32, bbox: BBox) -> Self {
        Self { category_id, bbox: Some(bbox), mask: Some(InstanceMask::Polygons(vec![crate::mask::Polygon::rect(&bbox)])), score: None }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageRecord {
    pub image_id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub subset: Option<Subset>,
    pub instances: Vec<Instance>,
}

impl PageRecord {
    pub fn new(image_id: u64, width: u32, height: u32) -> Self {
        Self { image_id, file_name: format!("{image_id}.png"), width, height, subset: None, instances: Vec::new() }
    }

    pub fn page_box(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub pages: Vec<PageRecord>,
}

impl Dataset {
    pub fn new(taxonomy: Taxonomy) -> Self {
        Self { taxonomy, pages: Vec::new() }
    }

    pub fn instance_count(&self) -> usize {
        self.pages.iter().map(|p| p.instances.len()).sum()
    }

    pub fn page(&self, image_id: u64) -> Option<&PageRecord> {
        self.pages.iter().find(|p| p.image_id == image_id)
    }
}

/// Which invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    BboxOrder,
    BboxNonFinite,
    BboxOutsidePage,
    ZeroArea,
    MissingBbox,
    UnknownCategory,
    PolygonVertices,
    RasterDimensions,
    MaskOutsideBbox,
    ScoreRange,
    PageDimensions,
    DuplicateImageId,
    TaxonomyIds,
    TaxonomyDuplicateName,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::BboxOrder => "bbox order",
            Rule::BboxNonFinite => "bbox non-finite",
            Rule::BboxOutsidePage => "bbox outside page",
            Rule::ZeroArea => "zero-area bbox",
            Rule::MissingBbox => "missing bbox",
            Rule::UnknownCategory => "unknown category",
            Rule::PolygonVertices => "polygon vertices",
            Rule::RasterDimensions => "raster dimensions",
            Rule::MaskOutsideBbox => "mask outside bbox",
            Rule::ScoreRange => "score range",
            Rule::PageDimensions => "page dimensions",
            Rule::DuplicateImageId => "duplicate image_id",
            Rule::TaxonomyIds => "taxonomy ids",
            Rule::TaxonomyDuplicateName => "taxonomy duplicate name",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub image_id: Option<u64>,
    pub instance: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl Violation {
    fn taxonomy(rule: Rule, detail: String) -> Self {
        Self { image_id: None, instance: None, rule, detail }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.image_id, self.instance) {
            (Some(p), Some(i)) => write!(f, "image {p} instance {i}: {}: {}", self.rule, self.detail),
            (Some(p), None) => write!(f, "image {p}: {}: {}", self.rule, self.detail),
            _ => write!(f, "taxonomy: {}: {}", self.rule, self.detail),
        }
    }
}

const MASK_TOL: f64 = 1.0;
const EDGE_EPS: f64 = 1e-6;

/// Check every type invariant; an empty result means the dataset is valid.
pub fn validate_dataset(d: &Dataset) -> Vec<Violation> {
    let mut out = d.taxonomy.violations();
    let mut seen = HashSet::new();
    for page in &d.pages {
        let pv = |rule, detail: String| Violation { image_id: Some(page.image_id), instance: None, rule, detail };
        if !seen.insert(page.image_id) {
            out.push(pv(Rule::DuplicateImageId, "image_id appears more than once".into()));
        }
        if page.width == 0 || page.height == 0 {
            out.push(pv(Rule::PageDimensions, format!("{}x{}", page.width, page.height)));
        }
        let page_box = page.page_box();
        for (idx, inst) in page.instances.iter().enumerate() {
            let mut push = |rule, detail: String| out.push(Violation { image_id: Some(page.image_id), instance: Some(idx), rule, detail });
            if !d.taxonomy.contains(inst.category_id) {
                push(Rule::UnknownCategory, format!("category_id {} not in taxonomy {:?}", inst.category_id, d.taxonomy.id));
            }
            if let Some(s) = inst.score {
                if !(0.0..=1.0).contains(&s) {
                    push(Rule::ScoreRange, format!("score {s}"));
                }
            }
            match &inst.bbox {
                None => {
                    if inst.score.is_none() {
                        push(Rule::MissingBbox, "ground-truth instance without bbox".into());
                    } else if inst.mask.is_none() {
                        push(Rule::MissingBbox, "prediction has neither bbox nor mask".into());
                    }
                }
                Some(b) => {
                    if !b.is_finite() {
                        push(Rule::BboxNonFinite, format!("{b:?}"));
                    } else if !b.is_ordered() {
                        push(Rule::BboxOrder, format!("{b:?}"));
                    } else {
                        if b.area() <= 0.0 {
                            push(Rule::ZeroArea, format!("{b:?}"));
                        }
                        if !b.within(&page_box, EDGE_EPS) {
                            push(Rule::BboxOutsidePage, format!("{b:?} outside {}x{}", page.width, page.height));
                        }
                    }
                }
            }
            match &inst.mask {
                None => {}
                Some(InstanceMask::Polygons(polys)) => {
                    if let Some(p) = polys.iter().find(|p| p.points.len() < 3) {
                        push(Rule::PolygonVertices, format!("polygon with {} vertices", p.points.len()));
                    } else if let Some(b) = inst.bbox.filter(|b| b.is_finite() && b.is_ordered()) {
                        let ext = polys.iter().filter_map(|p| p.extent()).reduce(|a, c| a.union_hull(&c));
                        let inside = ext.is_none_or(|e| e.within(&b, MASK_TOL));
                        if !inside {
                            let raster = inst.mask.as_ref().unwrap().rasterize(page.width, page.height);
                            if let Some(mbr) = crate::geometry::box_from_mask_raster(&raster) {
                                if !mbr.within(&b, MASK_TOL) {
                                    push(Rule::MaskOutsideBbox, format!("mask bounds {mbr:?} vs bbox {b:?}"));
                                }
                            }
                        }
                    }
                }
                Some(InstanceMask::Raster(r)) => {
                    if r.width() != page.width || r.height() != page.height {
                        push(Rule::RasterDimensions, format!("raster {}x{} on page {}x{}", r.width(), r.height(), page.width, page.height));
                    } else if let Some(b) = inst.bbox.filter(|b| b.is_finite() && b.is_ordered()) {
                        if let Some(mbr) = crate::geometry::box_from_mask_raster(r) {
                            if !mbr.within(&b, MASK_TOL) {
                                push(Rule::MaskOutsideBbox, format!("mask bounds {mbr:?} vs bbox {b:?}"));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
