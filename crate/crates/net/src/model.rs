//! Query-based instance segmentation with K refinement iterations.
//!
//! Each iteration pools RoI features at the previous boxes, mixes the
//! queries with a Transformer encoder, fuses each query with its own RoI
//! through dynamically generated channel mixers, and predicts classes, box
//! deltas and mask embeddings with MLP heads.

use tdla_core::synth::PageImage;

use crate::config::ModelConfig;
use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::{c, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
/// Lower bound on predicted box sides, in normalized units.
pub const MIN_BOX_SIDE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct IterVars {
    pub logits: Var,
    pub boxes: Var,
    pub masks: Var,
}

/// Per-iteration values, boxes as normalized `cx, cy, w, h`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput<T> {
    pub class_logits: Tensor<T>,
    pub boxes: Tensor<T>,
    pub mask_embeddings: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub iterations: Vec<IterationOutput<T>>,
}

impl<T: Scalar> ModelOutput<T> {
    pub fn last(&self) -> &IterationOutput<T> {
        self.iterations.last().expect("at least one iteration")
    }
}

fn linear<T: Scalar>(p: &mut ParamStore<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(&format!("{name}.w"), init.xavier(fan_in, fan_out));
    p.insert(&format!("{name}.b"), Tensor::zeros(vec![fan_out]));
}

fn norm<T: Scalar>(p: &mut ParamStore<T>, name: &str, n: usize) {
    p.insert(&format!("{name}.g"), Tensor::full(vec![n], T::one()));
    p.insert(&format!("{name}.b"), Tensor::zeros(vec![n]));
}

/// Head output layer names for the two head layouts.
fn head_layers(cfg: &ModelConfig) -> [(&'static str, Vec<&'static str>); 3] {
    if cfg.shared_trunk {
        [
            ("cls", vec!["trunk.0", "trunk.1", "cls.out"]),
            ("box", vec!["trunk.0", "trunk.1", "box.out"]),
            ("mask", vec!["trunk.0", "trunk.1", "mask.out"]),
        ]
    } else {
        [("cls", vec!["cls.0", "cls.1"]), ("box", vec!["box.0", "box.1", "box.2"]), ("mask", vec!["mask.0", "mask.1"])]
    }
}

fn head_prefix(cfg: &ModelConfig, k: usize) -> String {
    if cfg.shared_heads {
        "head".to_string()
    } else {
        format!("iter{k}.head")
    }
}

/// Deterministic initialization; query boxes start as the full image.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut p = ParamStore::default();
    let mut init = Init::new(seed);
    let d = cfg.embed_dim;
    let mut cin = 3;
    for (i, &co) in cfg.backbone_channels.iter().enumerate() {
        p.insert(&format!("backbone.{i}.w"), init.conv(co, cin, 3));
        p.insert(&format!("backbone.{i}.b"), Tensor::zeros(vec![co]));
        cin = co;
    }
    p.insert("query.embed", init.uniform(vec![cfg.num_queries, d], 1.0));
    let r2 = cfg.roi_resolution * cfg.roi_resolution;
    for k in 0..cfg.iterations {
        if cfg.use_encoder {
            for l in 0..cfg.encoder_layers {
                let e = format!("iter{k}.enc{l}");
                for m in ["q", "k", "v", "o"] {
                    linear(&mut p, &mut init, &format!("{e}.{m}"), d, d);
                }
                norm(&mut p, &format!("{e}.ln1"), d);
                linear(&mut p, &mut init, &format!("{e}.ffn1"), d, cfg.ffn_dim);
                linear(&mut p, &mut init, &format!("{e}.ffn2"), cfg.ffn_dim, d);
                norm(&mut p, &format!("{e}.ln2"), d);
            }
        }
        if cfg.use_dynamic_decoder {
            let h = cfg.dynamic_dim;
            linear(&mut p, &mut init, &format!("iter{k}.dyn.gen"), d, 2 * d * h);
            norm(&mut p, &format!("iter{k}.dyn.ln1"), h);
            norm(&mut p, &format!("iter{k}.dyn.ln2"), d);
            linear(&mut p, &mut init, &format!("iter{k}.dyn.out"), r2 * d, d);
            norm(&mut p, &format!("iter{k}.dyn.ln3"), d);
        }
        norm(&mut p, &format!("iter{k}.obj.ln1"), d);
        linear(&mut p, &mut init, &format!("iter{k}.obj.ffn1"), d, cfg.ffn_dim);
        linear(&mut p, &mut init, &format!("iter{k}.obj.ffn2"), cfg.ffn_dim, d);
        norm(&mut p, &format!("iter{k}.obj.ln2"), d);
        let pre = head_prefix(cfg, k);
        if k == 0 || !cfg.shared_heads {
            let outs = [("cls", cfg.num_classes + 1), ("box", 4), ("mask", cfg.mask_dim)];
            for (head, layers) in head_layers(cfg) {
                let out = outs.iter().find(|o| o.0 == head).unwrap().1;
                for (li, layer) in layers.iter().enumerate() {
                    let name = format!("{pre}.{layer}");
                    if p.contains(&format!("{name}.w")) {
                        continue;
                    }
                    let last = li + 1 == layers.len();
                    linear(&mut p, &mut init, &name, d, if last { out } else { d });
                    if last && head == "box" {
                        // start from the previous box
                        let id = p.id(&format!("{name}.w"));
                        p.tensors[id].data.iter_mut().for_each(|v| *v = T::zero());
                    }
                }
            }
        }
    }
    Ok(Model { cfg: cfg.clone(), params: p })
}

/// Taps of an aligned RoIAlign over a `[*, hf, wf]` map for normalized
/// `cx, cy, w, h` boxes. Row `(n·R + i)·R + j` averages `ratio²` bilinear
/// samples in bin `(i, j)` of box `n`. Samples outside `[-1, size]` in
/// either axis contribute zero.
pub fn roi_align_taps<T: Scalar>(hf: usize, wf: usize, boxes: &[[f64; 4]], r: usize, ratio: usize) -> (Vec<usize>, Vec<(usize, T)>) {
    let mut offsets = vec![0];
    let mut taps = Vec::new();
    let norm = 1.0 / (ratio * ratio) as f64;
    for b in boxes {
        let x0 = (b[0] - b[2] / 2.0) * wf as f64 - 0.5;
        let y0 = (b[1] - b[3] / 2.0) * hf as f64 - 0.5;
        let bw = b[2] * wf as f64 / r as f64;
        let bh = b[3] * hf as f64 / r as f64;
        for i in 0..r {
            for j in 0..r {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for sy in 0..ratio {
                    let y = y0 + bh * (i as f64 + (sy as f64 + 0.5) / ratio as f64);
                    for sx in 0..ratio {
                        let x = x0 + bw * (j as f64 + (sx as f64 + 0.5) / ratio as f64);
                        bilinear_taps(hf, wf, y, x, norm, &mut acc);
                    }
                }
                acc.sort_by_key(|t| t.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
                for (idx, w) in acc {
                    match merged.last_mut() {
                        Some(last) if last.0 == idx => last.1 += w,
                        _ => merged.push((idx, w)),
                    }
                }
                taps.extend(merged.into_iter().filter(|t| t.1 != 0.0).map(|(i, w)| (i, c::<T>(w))));
                offsets.push(taps.len());
            }
        }
    }
    (offsets, taps)
}

fn bilinear_taps(h: usize, w: usize, y: f64, x: f64, scale: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut yl, mut xl) = (y.floor() as usize, x.floor() as usize);
    let (yh, xh);
    let (mut y, mut x) = (y, x);
    if yl >= h - 1 {
        yl = h - 1;
        yh = h - 1;
        y = yl as f64;
    } else {
        yh = yl + 1;
    }
    if xl >= w - 1 {
        xl = w - 1;
        xh = w - 1;
        x = xl as f64;
    } else {
        xh = xl + 1;
    }
    let (ly, lx) = (y - yl as f64, x - xl as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((yl * w + xl, hy * hx * scale));
    out.push((yl * w + xh, hy * lx * scale));
    out.push((yh * w + xl, ly * hx * scale));
    out.push((yh * w + xh, ly * lx * scale));
}

/// New normalized boxes from previous boxes and `dx, dy, dw, dh` deltas:
/// centers move by `d·size`, sizes scale by `exp(min(d, cap))`, corners are
/// clamped to the unit square and sides kept at least [`MIN_BOX_SIDE`].
pub fn apply_box_deltas<T: Scalar>(g: &mut Graph<T>, prev: &[[f64; 4]], deltas: Var, cap: f64) -> Var {
    let n = prev.len();
    let col = |k: usize| Tensor::new(vec![n, 1], prev.iter().map(|b| c::<T>(b[k])).collect());
    let (pcx, pcy, pw, ph) = (g.constant(col(0)), g.constant(col(1)), g.constant(col(2)), g.constant(col(3)));
    let d: Vec<Var> = (0..4).map(|k| g.slice_cols(deltas, k, 1)).collect();
    let sx = g.mul(d[0], pw);
    let cx = g.add(pcx, sx);
    let sy = g.mul(d[1], ph);
    let cy = g.add(pcy, sy);
    let cw = g.clamp(d[2], f64::NEG_INFINITY, cap);
    let ew = g.exp(cw);
    let w = g.mul(pw, ew);
    let chh = g.clamp(d[3], f64::NEG_INFINITY, cap);
    let eh = g.exp(chh);
    let h = g.mul(ph, eh);
    // low corner in [0, 1 - floor], high corner at least floor above it
    let corners = |g: &mut Graph<T>, center: Var, size: Var| {
        let half = g.scale(size, 0.5);
        let lo = g.sub(center, half);
        let hi = g.add(center, half);
        let lo = g.clamp(lo, 0.0, 1.0 - MIN_BOX_SIDE);
        let hi = g.clamp(hi, 0.0, 1.0);
        let least = g.add_scalar(lo, MIN_BOX_SIDE);
        (lo, g.max(hi, least))
    };
    let (x0, x1) = corners(g, cx, w);
    let (y0, y1) = corners(g, cy, h);
    let nw = g.sub(x1, x0);
    let nh = g.sub(y1, y0);
    let mid = |g: &mut Graph<T>, lo: Var, hi: Var| {
        let s = g.add(lo, hi);
        g.scale(s, 0.5)
    };
    let ncx = mid(g, x0, x1);
    let ncy = mid(g, y0, y1);
    g.concat_cols(&[ncx, ncy, nw, nh])
}

/// Row-major `[n, 4]` values as boxes.
pub fn boxes_of<T: Scalar>(t: &Tensor<T>) -> Vec<[f64; 4]> {
    t.to_f64().chunks(4).map(|b| [b[0], b[1], b[2], b[3]]).collect()
}

impl<T: Scalar> Model<T> {
    fn p(&self, g: &mut Graph<T>, b: &mut Binder, name: &str) -> Var {
        b.bind(g, &self.params, name)
    }

    fn linear(&self, g: &mut Graph<T>, b: &mut Binder, name: &str, x: Var) -> Var {
        let w = self.p(g, b, &format!("{name}.w"));
        let bias = self.p(g, b, &format!("{name}.b"));
        let y = g.matmul(x, w);
        g.add_row(y, bias)
    }

    fn norm(&self, g: &mut Graph<T>, b: &mut Binder, name: &str, x: Var) -> Var {
        let gamma = self.p(g, b, &format!("{name}.g"));
        let beta = self.p(g, b, &format!("{name}.b"));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn ffn(&self, g: &mut Graph<T>, b: &mut Binder, pre: &str, x: Var) -> Var {
        let h = self.linear(g, b, &format!("{pre}.ffn1"), x);
        let h = g.relu(h);
        self.linear(g, b, &format!("{pre}.ffn2"), h)
    }

    /// Image as a `[3, h, w]` tensor centered on zero.
    pub fn image_tensor(image: &PageImage) -> Tensor<T> {
        let (w, h) = (image.width as usize, image.height as usize);
        let mut data = vec![T::zero(); 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data[(ch * h + y) * w + x] = c((image.data[(y * w + x) * 3 + ch] as f64 - 0.5) * 2.0);
                }
            }
        }
        Tensor::new(vec![3, h, w], data)
    }

    /// Stride-s feature map `[d, h/s, w/s]`.
    pub fn backbone_features(&self, g: &mut Graph<T>, b: &mut Binder, image: &PageImage) -> Result<Var> {
        if image.width < 64 || image.height < 64 {
            return Err(NetError::UndersizedImage { width: image.width, height: image.height });
        }
        let mut x = g.constant(Self::image_tensor(image));
        for (i, &s) in self.cfg.backbone_strides.iter().enumerate() {
            let w = self.p(g, b, &format!("backbone.{i}.w"));
            let bias = self.p(g, b, &format!("backbone.{i}.b"));
            x = g.conv2d(x, w, bias, 3, s, 1);
            x = g.relu(x);
        }
        Ok(x)
    }

    /// `[N·R², d]` region features, rows grouped by query.
    pub fn roi_align(&self, g: &mut Graph<T>, features: Var, boxes: &[[f64; 4]]) -> Var {
        let s = g.shape(features).to_vec();
        let (offsets, taps) = roi_align_taps(s[1], s[2], boxes, self.cfg.roi_resolution, self.cfg.sampling_ratio);
        g.gather(features, offsets, taps)
    }

    fn attention(&self, g: &mut Graph<T>, b: &mut Binder, pre: &str, x: Var) -> Var {
        let d = self.cfg.embed_dim;
        let nh = self.cfg.heads;
        let dh = d / nh;
        let q = self.linear(g, b, &format!("{pre}.q"), x);
        let k = self.linear(g, b, &format!("{pre}.k"), x);
        let v = self.linear(g, b, &format!("{pre}.v"), x);
        let mut outs = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh, false, true);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = g.concat_cols(&outs);
        self.linear(g, b, &format!("{pre}.o"), cat)
    }

    /// Post-norm Transformer encoder over the `[N, d]` queries, without
    /// positional information.
    pub fn encoder_forward(&self, g: &mut Graph<T>, b: &mut Binder, k: usize, q: Var) -> Var {
        if !self.cfg.use_encoder {
            return q;
        }
        let mut x = q;
        for l in 0..self.cfg.encoder_layers {
            let pre = format!("iter{k}.enc{l}");
            let a = self.attention(g, b, &pre, x);
            let r = g.add(x, a);
            let x1 = self.norm(g, b, &format!("{pre}.ln1"), r);
            let f = self.ffn(g, b, &pre, x1);
            let r = g.add(x1, f);
            x = self.norm(g, b, &format!("{pre}.ln2"), r);
        }
        x
    }

    /// Per-query fusion of `[N, d]` queries with `[N·R², d]` RoI features.
    pub fn dynamic_decode(&self, g: &mut Graph<T>, b: &mut Binder, k: usize, q: Var, roi: Var) -> Result<Var> {
        let n = g.shape(q)[0];
        let d = self.cfg.embed_dim;
        let r2 = self.cfg.roi_resolution * self.cfg.roi_resolution;
        if g.shape(roi) != [n * r2, d] {
            return Err(NetError::Shape(format!("roi {:?} for {n} queries of width {d}", g.shape(roi))));
        }
        if !self.cfg.use_dynamic_decoder {
            let avg = g.constant(Tensor::full(vec![n, r2], c(1.0 / r2 as f64)));
            return Ok(g.batch_matmul(avg, roi, n, 1, r2, d));
        }
        let h = self.cfg.dynamic_dim;
        let pre = format!("iter{k}.dyn");
        let params = self.linear(g, b, &format!("{pre}.gen"), q);
        let w1 = g.slice_cols(params, 0, d * h);
        let w2 = g.slice_cols(params, d * h, h * d);
        let f = g.batch_matmul(roi, w1, n, r2, d, h);
        let f = self.norm(g, b, &format!("{pre}.ln1"), f);
        let f = g.relu(f);
        let f = g.batch_matmul(f, w2, n, r2, h, d);
        let f = self.norm(g, b, &format!("{pre}.ln2"), f);
        let f = g.relu(f);
        let f = g.reshape(f, vec![n, r2 * d]);
        let f = self.linear(g, b, &format!("{pre}.out"), f);
        let f = self.norm(g, b, &format!("{pre}.ln3"), f);
        Ok(g.relu(f))
    }

    /// Class logits `[N, C+1]`, box deltas `[N, 4]`, mask embeddings `[N, D]`.
    pub fn heads_forward(&self, g: &mut Graph<T>, b: &mut Binder, k: usize, x: Var) -> (Var, Var, Var) {
        let pre = head_prefix(&self.cfg, k);
        let mut outs = Vec::with_capacity(3);
        let mut trunk: Option<Var> = None;
        for (_, layers) in head_layers(&self.cfg) {
            let mut h = x;
            let mut start = 0;
            if self.cfg.shared_trunk {
                if let Some(t) = trunk {
                    h = t;
                    start = 2;
                }
            }
            for (li, layer) in layers.iter().enumerate().skip(start) {
                h = self.linear(g, b, &format!("{pre}.{layer}"), h);
                if li + 1 < layers.len() {
                    h = g.relu(h);
                }
                if self.cfg.shared_trunk && li == 1 {
                    trunk = Some(h);
                }
            }
            outs.push(h);
        }
        (outs[0], outs[1], outs[2])
    }

    /// Full forward pass recorded on `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, b: &mut Binder, image: &PageImage) -> Result<Vec<IterVars>> {
        Ok(self.forward_graph_frozen(g, b, image, None)?.0)
    }

    /// Forward pass that also returns the detached input boxes of every
    /// iteration. With `frozen`, those inputs are replaced by the given
    /// boxes, which makes the recorded loss the exact function whose
    /// gradient backpropagation computes.
    pub fn forward_graph_frozen(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder,
        image: &PageImage,
        frozen: Option<&[Vec<[f64; 4]>]>,
    ) -> Result<(Vec<IterVars>, Vec<Vec<[f64; 4]>>)> {
        let feat = self.backbone_features(g, b, image)?;
        let n = self.cfg.num_queries;
        let mut boxes = vec![[0.5, 0.5, 1.0, 1.0]; n];
        let mut inputs = Vec::with_capacity(self.cfg.iterations);
        let mut q = self.p(g, b, "query.embed");
        let mut out = Vec::with_capacity(self.cfg.iterations);
        for k in 0..self.cfg.iterations {
            if let Some(f) = frozen {
                boxes = f[k].clone();
            }
            inputs.push(boxes.clone());
            let roi = self.roi_align(g, feat, &boxes);
            let qe = self.encoder_forward(g, b, k, q);
            let fused = self.dynamic_decode(g, b, k, qe, roi)?;
            let pre = format!("iter{k}.obj");
            let r = g.add(qe, fused);
            let obj = self.norm(g, b, &format!("{pre}.ln1"), r);
            let f = self.ffn(g, b, &pre, obj);
            let r = g.add(obj, f);
            let obj = self.norm(g, b, &format!("{pre}.ln2"), r);
            let (logits, deltas, masks) = self.heads_forward(g, b, k, obj);
            let nb = apply_box_deltas(g, &boxes, deltas, self.cfg.box_delta_cap);
            boxes = boxes_of(g.value(nb));
            out.push(IterVars { logits, boxes: nb, masks });
            q = obj;
        }
        Ok((out, inputs))
    }

    pub fn forward(&self, image: &PageImage) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let vars = self.forward_graph(&mut g, &mut b, image)?;
        Ok(ModelOutput {
            iterations: vars
                .iter()
                .map(|v| IterationOutput {
                    class_logits: g.value(v.logits).clone(),
                    boxes: g.value(v.boxes).clone(),
                    mask_embeddings: g.value(v.masks).clone(),
                })
                .collect(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    /// Names of the parameters read by the heads at iteration `k`.
    pub fn head_parameter_names(&self, k: usize) -> Vec<String> {
        let pre = head_prefix(&self.cfg, k);
        let mut v: Vec<String> = self.params.names.iter().filter(|n| n.starts_with(&format!("{pre}."))).cloned().collect();
        v.sort();
        v
    }
}
