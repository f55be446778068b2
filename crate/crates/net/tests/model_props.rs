use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdla_core::synth::PageImage;
use tdla_net::graph::Graph;
use tdla_net::model::apply_box_deltas;
use tdla_net::params::{Binder, ParamStore};
use tdla_net::tensor::Tensor;
use tdla_net::{init_model, Model, ModelConfig};

fn noise_page(w: u32, h: u32, seed: u64) -> PageImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = PageImage::filled(w, h, 0.0);
    img.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
    img
}

fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Every parameter redrawn so norms and biases are not at their identity init.
fn scrambled(cfg: &ModelConfig, seed: u64) -> Model<f64> {
    let mut m = init_model::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in &mut m.params.tensors {
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    m
}

fn encode(m: &Model<f64>, q: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params);
    let qv = g.constant(q.clone());
    let out = m.encoder_forward(&mut g, &mut b, 0, qv);
    g.value(out).clone()
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = ModelConfig { encoder_layers: 2, ..ModelConfig::toy(5) };
    let m = scrambled(&cfg, 1);
    let (n, d) = (cfg.num_queries, cfg.embed_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q = random_rows(n, d, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pq = Tensor::from_rows(&perm.iter().map(|&i| q.row(i).to_vec()).collect::<Vec<_>>());
        let (a, b) = (encode(&m, &q), encode(&m, &pq));
        for (r, &src) in perm.iter().enumerate() {
            for (x, y) in b.row(r).iter().zip(a.row(src)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    assert!(worst < 1e-5, "max deviation {worst}");
}

#[test]
fn encoder_single_query_and_duplicates() {
    let cfg = ModelConfig { num_queries: 1, ..ModelConfig::toy(2) };
    let m = scrambled(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let one = encode(&m, &random_rows(1, cfg.embed_dim, &mut rng));
    assert!(one.is_finite());

    let cfg = ModelConfig { num_queries: 4, ..ModelConfig::toy(2) };
    let m = scrambled(&cfg, 3);
    let mut q = random_rows(4, cfg.embed_dim, &mut rng);
    let row0 = q.row(0).to_vec();
    q.data[2 * cfg.embed_dim..3 * cfg.embed_dim].copy_from_slice(&row0);
    let out = encode(&m, &q);
    assert_eq!(out.row(0), out.row(2));
    assert_ne!(out.row(0), out.row(1));
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
}

/// `x · W + b` for a row vector and row-major `[k, n]` weights.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize) -> Vec<f64> {
    (0..n).map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * n + j]).sum::<f64>() + b.map_or(0.0, |b| b[j])).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

#[test]
fn dynamic_decode_matches_hand_fusion() {
    let cfg = ModelConfig {
        num_queries: 2,
        embed_dim: 4,
        heads: 2,
        dynamic_dim: 3,
        roi_resolution: 1,
        backbone_channels: vec![4, 4, 4, 4],
        ..ModelConfig::toy(2)
    };
    let m = scrambled(&cfg, 7);
    let (d, h) = (4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = random_rows(2, d, &mut rng);
    let roi = random_rows(2, d, &mut rng);
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params);
    let (qv, rv) = (g.constant(q.clone()), g.constant(roi.clone()));
    let out = m.dynamic_decode(&mut g, &mut b, 0, qv, rv).unwrap();
    let got = g.value(out).clone();
    let p = |n: &str| m.params.get(&format!("iter0.dyn.{n}")).data.clone();
    for i in 0..2 {
        let gen = affine(q.row(i), &p("gen.w"), Some(&p("gen.b")), 2 * d * h);
        let (w1, w2) = gen.split_at(d * h);
        let f = relu(layer_norm(&affine(roi.row(i), w1, None, h), &p("ln1.g"), &p("ln1.b")));
        let f = relu(layer_norm(&affine(&f, w2, None, d), &p("ln2.g"), &p("ln2.b")));
        let f = affine(&f, &p("out.w"), Some(&p("out.b")), d);
        let want = relu(layer_norm(&f, &p("ln3.g"), &p("ln3.b")));
        for (x, y) in got.row(i).iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "row {i}: {x} vs {y}");
        }
    }
}

fn decode(m: &Model<f64>, q: &Tensor<f64>, roi: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params);
    let (qv, rv) = (g.constant(q.clone()), g.constant(roi.clone()));
    let out = m.dynamic_decode(&mut g, &mut b, 0, qv, rv).unwrap();
    g.value(out).clone()
}

#[test]
fn dynamic_decode_is_per_query_and_finite_on_zero_features() {
    let cfg = ModelConfig { num_queries: 5, ..ModelConfig::toy(2) };
    let m = scrambled(&cfg, 9);
    let (n, d, r2) = (5, cfg.embed_dim, cfg.roi_resolution * cfg.roi_resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let q = random_rows(n, d, &mut rng);
    let roi = random_rows(n * r2, d, &mut rng);
    let base = decode(&m, &q, &roi);
    let mut altered = roi.clone();
    let j = 3;
    altered.data[j * r2 * d..(j + 1) * r2 * d].iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
    let moved = decode(&m, &q, &altered);
    for i in 0..n {
        if i == j {
            assert_ne!(base.row(i), moved.row(i));
        } else {
            assert_eq!(base.row(i), moved.row(i));
        }
    }
    let zero = decode(&m, &q, &Tensor::zeros(vec![n * r2, d]));
    assert!(zero.is_finite());
    let mut g = Graph::new();
    let (qv, rv) = (g.constant(q.clone()), g.constant(Tensor::zeros(vec![n * r2 - 1, d])));
    assert!(m.dynamic_decode(&mut g, &mut Binder::new(&m.params), 0, qv, rv).is_err());
}

fn features(m: &Model<f64>, img: &PageImage) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new(&m.params);
    let f = m.backbone_features(&mut g, &mut b, img).unwrap();
    g.value(f).clone()
}

#[test]
fn backbone_translation_by_one_stride() {
    let cfg = ModelConfig::toy(2);
    let m = init_model::<f64>(&cfg, 11).unwrap();
    let s = cfg.stride() as u32;
    let a = noise_page(128, 128, 12);
    let mut b = noise_page(128, 128, 13);
    for y in 0..128u32 {
        for x in s..128 {
            for c in 0..3 {
                b.data[((y * 128 + x) * 3) as usize + c] = a.get(x - s, y, c);
            }
        }
    }
    let (fa, fb) = (features(&m, &a), features(&m, &b));
    let (ch, hh, ww) = (fa.shape[0], fa.shape[1], fa.shape[2]);
    assert_eq!((hh, ww), (16, 16));
    let at = |t: &Tensor<f64>, c: usize, y: usize, x: usize| t.data[(c * hh + y) * ww + x];
    for c in 0..ch {
        for y in 4..12 {
            for x in 4..11 {
                let (u, v) = (at(&fa, c, y, x), at(&fb, c, y, x + 1));
                assert!((u - v).abs() < 1e-9, "channel {c} cell ({y},{x}): {u} vs {v}");
            }
        }
    }
}

#[test]
fn one_iteration_is_the_first_iteration() {
    let cfg3 = ModelConfig::toy(3);
    let cfg1 = ModelConfig { iterations: 1, ..cfg3.clone() };
    let m3 = init_model::<f64>(&cfg3, 14).unwrap();
    let shape = init_model::<f64>(&cfg1, 0).unwrap();
    let mut store = ParamStore::default();
    for n in &shape.params.names {
        store.insert(n, m3.params.get(n).clone());
    }
    let m1 = Model { cfg: cfg1, params: store };
    let img = noise_page(96, 80, 15);
    let (o1, o3) = (m1.forward(&img).unwrap(), m3.forward(&img).unwrap());
    assert_eq!(o1.iterations.len(), 1);
    assert_eq!(o3.iterations.len(), 3);
    assert_eq!(o1.iterations[0], o3.iterations[0]);
}

fn head_sets(m: &Model<f32>) -> BTreeSet<(String, String)> {
    let mut sets = BTreeSet::new();
    for k in 0..m.cfg.iterations {
        for name in m.head_parameter_names(k) {
            let (prefix, rest) =
                name.rsplit_once(".head.").map(|(p, r)| (format!("{p}.head"), r)).unwrap_or(("head".into(), &name["head.".len()..]));
            sets.insert((prefix, rest.split('.').next().unwrap().to_string()));
        }
    }
    sets
}

#[test]
fn shared_heads_are_three_sets() {
    let cfg = ModelConfig::toy(4);
    let m = init_model::<f32>(&cfg, 0).unwrap();
    assert!(m.num_parameters() < 5_000_000, "{}", m.num_parameters());
    assert_eq!(head_sets(&m).len(), 3);
    assert_eq!(m.head_parameter_names(0), m.head_parameter_names(cfg.iterations - 1));
    let u = init_model::<f32>(&ModelConfig { shared_heads: false, ..cfg.clone() }, 0).unwrap();
    assert_eq!(head_sets(&u).len(), 3 * cfg.iterations);
}

#[test]
fn seeded_init_is_bitwise_reproducible() {
    let cfg = ModelConfig::toy(4);
    let (a, b) = (init_model::<f32>(&cfg, 21).unwrap(), init_model::<f32>(&cfg, 21).unwrap());
    assert!(a.params.tensors.iter().zip(&b.params.tensors).all(|(x, y)| x
        .data
        .iter()
        .zip(&y.data)
        .all(|(u, v)| u.to_bits() == v.to_bits())));
    assert_ne!(a, init_model::<f32>(&cfg, 22).unwrap());
}

#[test]
fn boxes_stay_in_the_unit_square_at_every_iteration() {
    let cfg = ModelConfig { iterations: 4, ..ModelConfig::toy(3) };
    for seed in 0..3 {
        let mut m = scrambled(&cfg, 30 + seed);
        // exaggerate the box branch so deltas saturate
        for name in m.params.names.clone().iter().filter(|n| n.starts_with("head.box")) {
            let id = m.params.id(name);
            m.params.tensors[id].data.iter_mut().for_each(|v| *v *= 20.0);
        }
        let out = m.forward(&noise_page(80, 112, seed)).unwrap();
        for it in &out.iterations {
            for b in it.boxes.data.chunks(4) {
                assert!(b[2] > 0.0 && b[3] > 0.0);
                for (c, s) in [(b[0], b[2]), (b[1], b[3])] {
                    assert!(c - s / 2.0 >= -1e-12 && c + s / 2.0 <= 1.0 + 1e-12, "{b:?}");
                }
            }
        }
    }
}

fn unit_box() -> impl Strategy<Value = [f64; 4]> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c, d)| {
        let (x0, x1) = (a.min(b), a.max(b) + 1e-3);
        let (y0, y1) = (c.min(d), c.max(d) + 1e-3);
        let (x1, y1) = (x1.min(1.0), y1.min(1.0));
        [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
    })
}

proptest! {
    #[test]
    fn box_update_stays_in_unit_square(
        prev in prop::collection::vec(unit_box(), 1..8),
        raw in prop::collection::vec(-50.0..50.0f64, 32),
    ) {
        let n = prev.len();
        let mut g = Graph::<f64>::new();
        let deltas = g.constant(Tensor::new(vec![n, 4], raw[..n * 4].to_vec()));
        let out = apply_box_deltas(&mut g, &prev, deltas, ModelConfig::toy(1).box_delta_cap);
        for b in g.value(out).data.chunks(4) {
            prop_assert!(b.iter().all(|v| v.is_finite()));
            prop_assert!(b[2] > 0.0 && b[3] > 0.0);
            prop_assert!(b[0] - b[2] / 2.0 >= -1e-12 && b[0] + b[2] / 2.0 <= 1.0 + 1e-12);
            prop_assert!(b[1] - b[3] / 2.0 >= -1e-12 && b[1] + b[3] / 2.0 <= 1.0 + 1e-12);
        }
    }
}
