//! Trained model bundled with its mask codec and label space, plus the
//! `tdla-v1` checkpoint container.
//!
//! A checkpoint is the 8-byte tag `tdla-v1\n`, a little-endian `u64`
//! header length, a JSON header (config, codec, taxonomy, class ids and
//! the parameter table) and the parameters as contiguous little-endian
//! `f32` values in table order.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tdla_core::model::Category;
use tdla_core::synth::PageImage;
use tdla_core::{Dataset, Instance, InstanceMask, PageRecord, Taxonomy};

use crate::codec::MaskCodec;
use crate::config::ModelConfig;
use crate::error::{NetError, Result};
use crate::loss::{denormalize, softmax_rows};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_TAG: &[u8; 8] = b"tdla-v1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub model: Model<f32>,
    pub codec: MaskCodec,
    pub taxonomy: Taxonomy,
    /// Category id of each foreground logit column `1..=C`.
    pub class_ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: ModelConfig,
    codec: MaskCodec,
    taxonomy_id: String,
    categories: Vec<Category>,
    class_ids: Vec<u32>,
    params: Vec<ParamEntry>,
}

impl Detector {
    pub fn new(model: Model<f32>, codec: MaskCodec, taxonomy: Taxonomy) -> Result<Self> {
        let class_ids: Vec<u32> = taxonomy.categories.iter().map(|c| c.id).collect();
        if class_ids.len() != model.cfg.num_classes {
            return Err(NetError::InvalidConfig(format!(
                "{} classes for taxonomy {} with {} categories",
                model.cfg.num_classes,
                taxonomy.id,
                class_ids.len()
            )));
        }
        if codec.dim != model.cfg.mask_dim || codec.m != model.cfg.mask_patch {
            return Err(NetError::InvalidConfig("codec does not match mask_dim / mask_patch".into()));
        }
        Ok(Self { model, codec, taxonomy, class_ids })
    }

    /// Instances for one page. Scores are foreground probabilities of the
    /// argmax foreground class; no suppression across queries.
    pub fn predict(&self, image: &PageImage, width: u32, height: u32, score_threshold: f64, max_instances: usize) -> Result<Vec<Instance>> {
        let out = self.model.forward(image)?;
        let last = out.last();
        let c1 = self.model.cfg.num_classes + 1;
        let probs = softmax_rows(&last.class_logits.to_f64(), c1);
        let boxes = last.boxes.to_f64();
        let codes = last.mask_embeddings.to_f64();
        let d = self.model.cfg.mask_dim;
        let mut scored: Vec<(usize, usize, f64)> = (0..self.model.cfg.num_queries)
            .map(|q| {
                let row = &probs[q * c1 + 1..(q + 1) * c1];
                let (k, p) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (k, &p)| if p > a.1 { (k, p) } else { a });
                (q, k, p)
            })
            .filter(|s| s.2 >= score_threshold)
            .collect();
        scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        scored.truncate(max_instances);
        Ok(scored
            .into_iter()
            .map(|(q, k, p)| {
                let bbox = denormalize(&boxes[q * 4..q * 4 + 4], width, height);
                let mask = self.codec.paste(&codes[q * d..(q + 1) * d], &bbox, width, height);
                Instance { category_id: self.class_ids[k], bbox: Some(bbox), mask: Some(InstanceMask::Raster(mask)), score: Some(p) }
            })
            .collect())
    }

    /// Predictions for every page, in page order; runs on `workers` threads.
    pub fn predict_dataset(
        &self,
        pages: &[PageRecord],
        images: &[PageImage],
        score_threshold: f64,
        max_instances: usize,
        workers: usize,
    ) -> Result<Dataset> {
        let pool =
            rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| NetError::InvalidConfig(e.to_string()))?;
        let preds: Vec<Result<PageRecord>> = pool.install(|| {
            pages
                .par_iter()
                .zip(images.par_iter())
                .map(|(p, img)| {
                    let mut out = PageRecord { instances: Vec::new(), ..p.clone() };
                    out.instances = self.predict(img, p.width, p.height, score_threshold, max_instances)?;
                    Ok(out)
                })
                .collect()
        });
        let mut d = Dataset::new(self.taxonomy.clone());
        for p in preds {
            d.pages.push(p?);
        }
        Ok(d)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.model.params;
        let mut offset = 0;
        let params = p
            .names
            .iter()
            .zip(&p.tensors)
            .map(|(n, t)| {
                let e = ParamEntry { name: n.clone(), shape: t.shape.clone(), offset };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            version: "tdla-v1".into(),
            config: self.model.cfg.clone(),
            codec: self.codec.clone(),
            taxonomy_id: self.taxonomy.id.clone(),
            categories: self.taxonomy.categories.clone(),
            class_ids: self.class_ids.clone(),
            params,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_TAG);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &p.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NetError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_TAG {
            return Err(bad("missing tdla-v1 tag"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(body).map_err(|e| NetError::Checkpoint(format!("header: {e}")))?;
        if h.version != "tdla-v1" {
            return Err(bad("unsupported version"));
        }
        let data = &bytes[16 + hlen..];
        let mut store = ParamStore::default();
        for e in &h.params {
            let n: usize = e.shape.iter().product();
            let raw = data.get(e.offset * 4..(e.offset + n) * 4).ok_or_else(|| bad("truncated parameters"))?;
            let vals = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            store.insert(&e.name, Tensor::new(e.shape.clone(), vals));
        }
        let expected = crate::model::init_model::<f32>(&h.config, 0)?;
        if expected.params.names != store.names || expected.params.tensors.iter().zip(&store.tensors).any(|(a, b)| a.shape != b.shape) {
            return Err(bad("parameter table does not match config"));
        }
        let taxonomy = Taxonomy { id: h.taxonomy_id, categories: h.categories };
        let model = Model { cfg: h.config, params: store };
        let mut d = Self::new(model, h.codec, taxonomy)?;
        d.class_ids = h.class_ids;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| NetError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| NetError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| NetError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn detector() -> Detector {
        let tax = Taxonomy::from_names("t", &["a", "b"]);
        let mut cfg = ModelConfig::toy(2);
        cfg.num_queries = 5;
        cfg.mask_dim = 4;
        cfg.mask_patch = 4;
        let patches: Vec<Vec<f64>> = (0..8).map(|k| (0..16).map(|j| ((j + k) % 3 == 0) as u8 as f64).collect()).collect();
        let codec = MaskCodec::fit(&patches, 4, 4).unwrap();
        Detector::new(init_model(&cfg, 3).unwrap(), codec, tax).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip() {
        let d = detector();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..8], b"tdla-v1\n");
        assert_eq!(Detector::from_bytes(&bytes).unwrap(), d);
        assert!(Detector::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Detector::from_bytes(b"nonsense-bytes-here").is_err());
    }

    #[test]
    fn threshold_edges() {
        let d = detector();
        let img = PageImage::filled(64, 64, 0.8);
        assert!(d.predict(&img, 64, 64, 1.0, 5).unwrap().is_empty());
        let all = d.predict(&img, 64, 64, 0.0, 5).unwrap();
        assert_eq!(all.len(), 5);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(all.iter().all(|i| i.bbox.unwrap().within(&tdla_core::BBox::new(0.0, 0.0, 64.0, 64.0), 1e-6)));
        assert_eq!(d.predict(&img, 64, 64, 0.0, 2).unwrap(), all[..2].to_vec());
    }
}
