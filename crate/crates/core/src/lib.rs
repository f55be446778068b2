//! Dataset model, COCO I/O, label remapping, geometry, bipartite matching,
//! synthetic pages and COCO-style evaluation for document layout analysis.

pub mod assignment;
pub mod coco;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mask;
pub mod model;
pub mod remap;
pub mod report;
pub mod split;
pub mod stats;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
pub use mask::{Bitmap, InstanceMask, Polygon};
pub use model::{validate_dataset, BBox, Category, Dataset, Instance, PageRecord, Subset, Taxonomy, Violation};
