//! COCO object-detection annotation files.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{InstanceMask, Polygon};
use crate::model::{validate_dataset, BBox, Category, Dataset, Instance, PageRecord, Subset, Taxonomy};
use crate::taxonomy;

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<CocoInfo>,
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CocoInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    taxonomy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subset: Option<Subset>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    #[serde(default)]
    segmentation: Segmentation,
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    #[default]
    #[serde(skip_serializing)]
    Missing,
    Other(serde_json::Value),
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u32,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supercategory: Option<String>,
}

fn parse_error(text: &str, e: serde_json::Error) -> Error {
    let (line, column) = (e.line(), e.column());
    let offset = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum::<usize>() + column.saturating_sub(1);
    Error::Parse { offset, line, column, msg: e.to_string() }
}

/// Parse a COCO document without validating instance invariants.
pub fn parse_coco_unchecked(text: &str, taxonomy: Option<&Taxonomy>) -> Result<Dataset> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| parse_error(text, e))?;
    let taxonomy = resolve_taxonomy(&file, taxonomy)?;
    let mut pages: Vec<PageRecord> = Vec::with_capacity(file.images.len());
    let mut index = HashMap::new();
    for img in &file.images {
        index.insert(img.id, pages.len());
        pages.push(PageRecord {
            image_id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            subset: img.subset,
            instances: Vec::new(),
        });
    }
    let mut annotations: Vec<&CocoAnnotation> = file.annotations.iter().collect();
    annotations.sort_by_key(|a| a.id);
    for a in annotations {
        let &slot = index.get(&a.image_id).ok_or(Error::DanglingAnnotation { annotation_id: a.id, image_id: a.image_id })?;
        if a.iscrowd != 0 {
            return Err(Error::Format(format!("annotation {}: iscrowd=1 is not supported", a.id)));
        }
        let bbox = BBox::from_xywh(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]);
        let mask = match &a.segmentation {
            Segmentation::Polygons(p) if !p.is_empty() => {
                if let Some(bad) = p.iter().find(|f| f.len() % 2 != 0) {
                    return Err(Error::Format(format!("annotation {}: polygon has odd coordinate count {}", a.id, bad.len())));
                }
                InstanceMask::Polygons(p.iter().map(|f| Polygon::from_flat(f)).collect())
            }
            Segmentation::Polygons(_) | Segmentation::Missing => InstanceMask::Polygons(vec![Polygon::rect(&bbox)]),
            Segmentation::Other(_) => return Err(Error::Format(format!("annotation {}: only polygon segmentation is supported", a.id))),
        };
        pages[slot].instances.push(Instance { category_id: a.category_id, bbox: Some(bbox), mask: Some(mask), score: a.score });
    }
    Ok(Dataset { taxonomy, pages })
}

fn resolve_taxonomy(file: &CocoFile, given: Option<&Taxonomy>) -> Result<Taxonomy> {
    if let Some(t) = given {
        for c in &file.categories {
            match t.name_of(c.id) {
                Some(n) if n == c.name => {}
                Some(n) => {
                    return Err(Error::Schema(format!(
                        "category id {} is {:?} in the file but {:?} in taxonomy {:?}",
                        c.id, c.name, n, t.id
                    )))
                }
                None => return Err(Error::Schema(format!("category id {} ({:?}) not in taxonomy {:?}", c.id, c.name, t.id))),
            }
        }
        return Ok(t.clone());
    }
    let mut cats: Vec<&CocoCategory> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let declared = file.info.as_ref().and_then(|i| i.taxonomy.clone());
    let names: Vec<&str> = cats.iter().map(|c| c.name.as_str()).collect();
    let builtin = match &declared {
        Some(id) => taxonomy::builtin(id),
        None => taxonomy::BUILTIN_IDS.iter().filter_map(|id| taxonomy::builtin(id)).find(|t| t.names().eq(names.iter().copied())),
    };
    if let Some(b) = builtin {
        if b.names().eq(names.iter().copied()) && cats.iter().enumerate().all(|(i, c)| c.id == i as u32 + 1) {
            return Ok(b);
        }
    }
    let id = declared.unwrap_or_else(|| "custom".to_string());
    let t = Taxonomy {
        id: id.clone(),
        categories: cats.iter().map(|c| Category { id: c.id, name: c.name.clone(), taxonomy_id: id.clone() }).collect(),
    };
    if let Some(v) = t.violations().first() {
        return Err(Error::Schema(v.to_string()));
    }
    Ok(t)
}

/// Parse and validate; any violation is an error.
pub fn parse_coco(text: &str, taxonomy: Option<&Taxonomy>) -> Result<Dataset> {
    let d = parse_coco_unchecked(text, taxonomy)?;
    let v = validate_dataset(&d);
    if v.is_empty() {
        Ok(d)
    } else {
        Err(Error::Invalid(v))
    }
}

pub fn load_coco_unchecked(path: impl AsRef<Path>, taxonomy: Option<&Taxonomy>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_unchecked(&text, taxonomy)
}

pub fn load_coco(path: impl AsRef<Path>, taxonomy: Option<&Taxonomy>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco(&text, taxonomy)
}

/// Serialize to a COCO document. Raster masks are written as exact
/// rectangle-decomposition polygons.
pub fn to_coco_string(d: &Dataset) -> String {
    let images = d
        .pages
        .iter()
        .map(|p| CocoImage { id: p.image_id, width: p.width, height: p.height, file_name: p.file_name.clone(), subset: p.subset })
        .collect();
    let mut annotations = Vec::new();
    let mut next_id = 1u64;
    for p in &d.pages {
        for inst in &p.instances {
            let polys = match &inst.mask {
                Some(InstanceMask::Polygons(ps)) => ps.clone(),
                Some(m @ InstanceMask::Raster(_)) => m.polygonize(p.width, p.height),
                None => inst.bbox.map(|b| vec![Polygon::rect(&b)]).unwrap_or_default(),
            };
            let bbox = inst
                .bbox
                .or_else(|| inst.mask.as_ref().and_then(|m| crate::geometry::box_from_mask(m, p.width, p.height).ok()))
                .unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: p.image_id,
                category_id: inst.category_id,
                bbox: bbox.to_xywh(),
                area: polys.iter().map(Polygon::area).sum(),
                segmentation: Segmentation::Polygons(polys.iter().map(Polygon::to_flat).collect()),
                iscrowd: 0,
                score: inst.score,
            });
            next_id += 1;
        }
    }
    let categories = d.taxonomy.categories.iter().map(|c| CocoCategory { id: c.id, name: c.name.clone(), supercategory: None }).collect();
    let file =
        CocoFile { info: Some(CocoInfo { taxonomy: Some(d.taxonomy.id.clone()), description: None }), images, annotations, categories };
    serde_json::to_string_pretty(&file).expect("COCO serialization")
}

pub fn save_coco(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_coco_string(d)).map_err(|e| Error::io(path, e))
}
