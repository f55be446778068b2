//! Central finite-difference check of analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdla_core::assignment::GtTargets;
use tdla_core::synth::PageImage;

use crate::error::Result;
use crate::loss::LossConfig;
use crate::model::Model;
use crate::tensor::Scalar;
use crate::train::{loss_and_grads, loss_value};

#[derive(Debug, Clone)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Number of flat parameter indices, drawn uniformly.
    pub count: usize,
    pub seed: u64,
    pub eps: f64,
    /// Relative-error denominator floor.
    pub floor: f64,
    /// Also hold every ReLU, abs, clamp, max and min at its unperturbed
    /// branch. Without this a large ReLU network almost surely has some unit
    /// crossing zero within `eps`, which bounds the attainable agreement.
    pub pin_branches: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { count: 100, seed: 0, eps: 1e-6, floor: 1e-5, pin_branches: false }
    }
}

/// Compare the gradients of `model` in precision `T` with central
/// differences of a double-precision copy. Matching and the detached
/// refinement boxes are frozen at their unperturbed values, so the
/// differenced function is the one backpropagation differentiates.
pub fn gradient_check<T: Scalar>(
    model: &Model<T>,
    image: &PageImage,
    gt: &GtTargets,
    loss: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheck> {
    let (_, grads, mut fixed) = loss_and_grads(model, image, gt, loss, None)?;
    if !cfg.pin_branches {
        fixed.branches.clear();
    }
    let eps = cfg.eps;
    let mut probe: Model<f64> = model.cast();
    let total = probe.params.count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let (t, e) = probe.params.locate(rng.gen_range(0..total));
        let orig = probe.params.tensors[t].data[e];
        probe.params.tensors[t].data[e] = orig + eps;
        let up = loss_value(&probe, image, gt, loss, Some(&fixed))?.total;
        probe.params.tensors[t].data[e] = orig - eps;
        let down = loss_value(&probe, image, gt, loss, Some(&fixed))?.total;
        probe.params.tensors[t].data[e] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[t].data[e].to_f64().unwrap();
        samples.push(GradSample {
            name: probe.params.names[t].clone(),
            index: e,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric, cfg.floor),
        });
    }
    Ok(GradCheck { samples })
}
