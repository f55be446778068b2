mod common;

use tdla_core::assignment::CostWeights;
use tdla_core::synth::LayoutFamily;
use tdla_net::gradcheck::{gradient_check, rel_error, GradCheckConfig};
use tdla_net::loss::LossConfig;
use tdla_net::train::{loss_and_grads, loss_value};
use tdla_net::{init_detector, train, Detector, ModelConfig, TrainConfig, TrainData};

const EPS: f64 = 1e-6;
const FLOOR: f64 = 1e-5;

/// Toy detector a few steps past initialization, so box layers are non-zero.
fn warmed(cfg: ModelConfig) -> (Detector, TrainData) {
    let data = common::toy_data(2, 5, LayoutFamily::Manhattan);
    let det = init_detector(&data.dataset, cfg, 1).unwrap();
    let tc = TrainConfig { epochs: 2, base_lr: 1e-3, ..Default::default() };
    (train(det, &data, &tc, None).unwrap().detector, data)
}

#[test]
fn single_precision_against_double_differences() {
    let (det, data) = warmed(ModelConfig::toy(0));
    assert!(det.model.num_parameters() < 5_000_000);
    let gt = common::targets(&det, &data, 0);
    let cfg = GradCheckConfig { count: 100, seed: 3, eps: EPS, floor: FLOOR, pin_branches: false };
    let r = gradient_check(&det.model, &data.images[0], &gt, &LossConfig::default(), &cfg).unwrap();
    assert_eq!(r.samples.len(), 100);
    assert!(r.max_rel_error() < 1e-2, "max rel error {}", r.max_rel_error());
    // the check is not vacuous
    assert!(r.samples.iter().filter(|s| s.analytic.abs() > 1e-4).count() >= 20);
}

#[test]
fn double_precision_on_the_local_smooth_piece() {
    let (det, data) = warmed(ModelConfig::toy(0));
    let m = det.model.cast::<f64>();
    let gt = common::targets(&det, &data, 1);
    let cfg = GradCheckConfig { count: 100, seed: 4, eps: EPS, floor: FLOOR, pin_branches: true };
    let r = gradient_check(&m, &data.images[1], &gt, &LossConfig::default(), &cfg).unwrap();
    assert!(r.max_rel_error() < 1e-4, "max rel error {}", r.max_rel_error());
    assert!(r.samples.iter().filter(|s| s.analytic.abs() > 1e-4).count() >= 20);
}

#[test]
fn pinning_is_exact_at_the_unperturbed_point() {
    let (det, data) = warmed(ModelConfig::toy(0));
    let m = det.model.cast::<f64>();
    let gt = common::targets(&det, &data, 0);
    let loss = LossConfig::default();
    let (plain, grads, frozen) = loss_and_grads(&m, &data.images[0], &gt, &loss, None).unwrap();
    assert!(frozen.branches.iter().any(|b| b.is_some()));
    let (pinned, again, _) = loss_and_grads(&m, &data.images[0], &gt, &loss, Some(&frozen)).unwrap();
    assert_eq!(plain, pinned);
    assert_eq!(grads, again);
}

#[test]
fn background_query_gradient_is_classification_only() {
    // without the encoder, query i only reaches its own outputs
    let cfg = ModelConfig { use_encoder: false, ..ModelConfig::toy(0) };
    let (det, data) = warmed(cfg);
    let m = det.model.cast::<f64>();
    let gt = common::targets(&det, &data, 0);
    let full = LossConfig::default();
    let (_, grads, frozen) = loss_and_grads(&m, &data.images[0], &gt, &full, None).unwrap();
    let n = m.cfg.num_queries;
    let dropped = (0..n).find(|&q| frozen.assignments.iter().all(|a| a.gt_for(q).is_none())).expect("some query is never matched");
    let cls_only = LossConfig { weights: CostWeights { l1: 0.0, giou: 0.0, mask: 0.0, ..full.weights }, ..full };
    let (_, cg, _) = loss_and_grads(&m, &data.images[0], &gt, &cls_only, Some(&frozen)).unwrap();
    let id = m.params.id("query.embed");
    let d = m.cfg.embed_dim;
    let row = |g: &[tdla_net::tensor::Tensor<f64>]| g[id].data[dropped * d..(dropped + 1) * d].to_vec();
    let (a, b) = (row(&grads), row(&cg));
    assert!(a.iter().any(|v| v.abs() > 0.0));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }
    // and matches finite differences of the classification-only loss
    let mut probe = m.clone();
    for j in [0, d / 2, d - 1] {
        let t = &mut probe.params.tensors[id].data[dropped * d + j];
        let orig = *t;
        *t = orig + EPS;
        let up = loss_value(&probe, &data.images[0], &gt, &cls_only, Some(&frozen)).unwrap().total;
        probe.params.tensors[id].data[dropped * d + j] = orig - EPS;
        let down = loss_value(&probe, &data.images[0], &gt, &cls_only, Some(&frozen)).unwrap().total;
        probe.params.tensors[id].data[dropped * d + j] = orig;
        let fd = (up - down) / (2.0 * EPS);
        assert!(rel_error(a[j], fd, FLOOR) < 1e-4, "{} vs {fd}", a[j]);
    }
}
