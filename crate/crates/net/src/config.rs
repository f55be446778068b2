use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// N, the number of object queries.
    pub num_queries: usize,
    /// d, the query and feature width.
    pub embed_dim: usize,
    /// D, the mask embedding length.
    pub mask_dim: usize,
    /// K, the number of refinement iterations.
    pub iterations: usize,
    /// C, foreground classes; logits carry one extra background column.
    pub num_classes: usize,
    /// RoI output side R.
    pub roi_resolution: usize,
    /// Bilinear samples per RoI bin side.
    pub sampling_ratio: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Hidden width of the generated per-query mixing layers.
    pub dynamic_dim: usize,
    /// Output channels of the four backbone stages; the last equals `embed_dim`.
    pub backbone_channels: Vec<usize>,
    /// Strides of the four backbone stages.
    pub backbone_strides: Vec<usize>,
    /// Mask patch side m.
    pub mask_patch: usize,
    pub use_encoder: bool,
    pub use_dynamic_decoder: bool,
    /// One head parameter set reused at every iteration. When false each
    /// iteration owns its heads.
    pub shared_heads: bool,
    /// Heads share a hidden trunk and differ only in their output layers.
    pub shared_trunk: bool,
    /// Upper bound on log-scale box deltas.
    pub box_delta_cap: f64,
}

impl ModelConfig {
    /// Desk-scale configuration used for overfitting and tests.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            num_queries: 50,
            embed_dim: 64,
            mask_dim: 40,
            iterations: 3,
            num_classes,
            roi_resolution: 7,
            sampling_ratio: 2,
            encoder_layers: 1,
            heads: 4,
            ffn_dim: 128,
            dynamic_dim: 16,
            backbone_channels: vec![16, 32, 48, 64],
            backbone_strides: vec![2, 2, 2, 1],
            mask_patch: 28,
            use_encoder: true,
            use_dynamic_decoder: true,
            shared_heads: true,
            shared_trunk: false,
            box_delta_cap: (1000.0f64 / 16.0).ln(),
        }
    }

    pub fn full(num_classes: usize) -> Self {
        Self {
            num_queries: 300,
            embed_dim: 256,
            iterations: 6,
            ffn_dim: 2048,
            heads: 8,
            dynamic_dim: 64,
            backbone_channels: vec![64, 128, 256, 256],
            ..Self::toy(num_classes)
        }
    }

    /// Backbone stride s.
    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    /// Set one field from text; lists are comma separated.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| NetError::ConfigKey { key: key.into(), msg: format!("cannot parse {v:?}") })
        }
        let list = |v: &str| v.split(',').map(|x| num(key, x)).collect::<Result<Vec<usize>>>();
        match key {
            "num_queries" => self.num_queries = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "mask_dim" => self.mask_dim = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "num_classes" => self.num_classes = num(key, v)?,
            "roi_resolution" => self.roi_resolution = num(key, v)?,
            "sampling_ratio" => self.sampling_ratio = num(key, v)?,
            "encoder_layers" => self.encoder_layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "ffn_dim" => self.ffn_dim = num(key, v)?,
            "dynamic_dim" => self.dynamic_dim = num(key, v)?,
            "backbone_channels" => self.backbone_channels = list(v)?,
            "backbone_strides" => self.backbone_strides = list(v)?,
            "mask_patch" => self.mask_patch = num(key, v)?,
            "use_encoder" => self.use_encoder = num(key, v)?,
            "use_dynamic_decoder" => self.use_dynamic_decoder = num(key, v)?,
            "shared_heads" => self.shared_heads = num(key, v)?,
            "shared_trunk" => self.shared_trunk = num(key, v)?,
            "box_delta_cap" => self.box_delta_cap = num(key, v)?,
            _ => return Err(NetError::ConfigKey { key: key.into(), msg: "unknown model key".into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.num_queries == 0 || self.mask_dim == 0 || self.iterations == 0 || self.roi_resolution == 0 {
            return bad("N, D, K and R must be at least 1".into());
        }
        if self.num_classes == 0 || self.embed_dim == 0 || self.sampling_ratio == 0 || self.dynamic_dim == 0 {
            return bad("C, d, sampling ratio and dynamic width must be at least 1".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.backbone_channels.len() != 4 || self.backbone_strides.len() != 4 {
            return bad("backbone needs four stages".into());
        }
        if self.backbone_channels[3] != self.embed_dim {
            return bad("last backbone stage must output embed_dim channels".into());
        }
        if self.backbone_strides.contains(&0) {
            return bad("backbone strides must be positive".into());
        }
        if self.mask_dim > self.mask_patch * self.mask_patch {
            return bad(format!("mask_dim {} exceeds {}x{} patch", self.mask_dim, self.mask_patch, self.mask_patch));
        }
        Ok(())
    }
}
