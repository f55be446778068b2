//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended as operations run; `backward` walks them in reverse
//! and accumulates gradients into every node that depends on a parameter.

use crate::tensor::{c, matmul, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Max(Var, Var),
    Min(Var, Var),
    Sum(Var),
    Reshape(Var),
    SliceCols { a: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    SelectRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, geo: ConvGeom, cols: Vec<T> },
    Gather { src: Var, offsets: Vec<usize>, taps: Vec<(usize, T)>, channels: usize, plane: usize },
    Pick { a: Var, idx: Vec<usize> },
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { cin, h, w, k, stride, pad, ho, wo }
    }

    /// For each (channel, ky, kx) row and output position, the input index.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * self.ho * self.wo + oy * self.wo + ox, (ci * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Per-element branch taken by a piecewise op; backward follows it.
    branch: Option<Vec<u8>>,
}

/// Branch decisions of every piecewise op in a graph, by node index.
pub type BranchPattern = Vec<Option<Vec<u8>>>;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    replay: BranchPattern,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), replay: Vec::new() }
    }

    /// A graph whose piecewise ops take the branches recorded in `pattern`
    /// instead of deciding from their inputs. The graph must be rebuilt with
    /// the same sequence of ops. Used to difference one smooth piece.
    pub fn replaying(pattern: BranchPattern) -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), replay: pattern }
    }

    pub fn take_branches(&mut self) -> BranchPattern {
        self.nodes.iter_mut().map(|n| n.branch.take()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, branch: None });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true, branch: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false, branch: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let x = &self.nodes[a.0].value;
        let t = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() };
        self.push(t, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.shape, y.shape, "elementwise shape mismatch");
        let t = Tensor { shape: x.shape.clone(), data: x.data.iter().zip(&y.data).map(|(&u, &v)| f(u, v)).collect() };
        self.push(t, op, &[a, b])
    }

    fn piecewise(&mut self, a: Var, b: Option<Var>, op: Op<T>, decide: impl Fn(T, T) -> u8, apply: impl Fn(u8, T, T) -> T) -> Var {
        let x = &self.nodes[a.0].value;
        let y = b.map(|b| &self.nodes[b.0].value.data);
        if let Some(y) = y {
            assert_eq!(x.len(), y.len(), "elementwise shape mismatch");
        }
        let other = |j: usize| y.map_or(T::zero(), |y| y[j]);
        let branch: Vec<u8> = match self.replay.get(self.nodes.len()) {
            Some(Some(r)) => {
                assert_eq!(r.len(), x.len(), "replayed graph differs in structure");
                r.clone()
            }
            Some(None) => panic!("replayed graph differs in structure"),
            None => (0..x.len()).map(|j| decide(x.data[j], other(j))).collect(),
        };
        let data = (0..x.len()).map(|j| apply(branch[j], x.data[j], other(j))).collect();
        let t = Tensor { shape: x.shape.clone(), data };
        let inputs: Vec<Var> = std::iter::once(a).chain(b).collect();
        let v = self.push(t, op, &inputs);
        self.nodes[v.0].branch = Some(branch);
        v
    }

    /// `[m,k]·[k,n]`; `ta`/`tb` read the stored operand transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dims {sa:?} {sb:?}");
        let mut out = vec![T::zero(); m * n];
        matmul(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n, ta, tb, &mut out, T::zero());
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, m, k, n, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `batch` independent `[m,k]·[k,n]` products over contiguous blocks.
    /// The result has shape `[batch·m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize) -> Var {
        assert_eq!(self.value(a).len(), batch * m * k);
        assert_eq!(self.value(b).len(), batch * k * n);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        for i in 0..batch {
            matmul(&ad[i * m * k..], &bd[i * k * n..], m, k, n, false, false, &mut out[i * m * n..(i + 1) * m * n], T::zero());
        }
        self.push(Tensor::new(vec![batch * m, n], out), Op::BatchMatMul { a, b, batch, m, k, n }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.piecewise(a, Some(b), Op::Max(a, b), |x, y| (x >= y) as u8, |k, x, y| if k == 1 { x } else { y })
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.piecewise(a, Some(b), Op::Min(a, b), |x, y| (x <= y) as u8, |k, x, y| if k == 1 { x } else { y })
    }

    fn row_op(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = x.cols();
        assert_eq!(r.len(), n, "row broadcast {:?} with {:?}", x.shape, r.shape);
        let data = x.data.iter().enumerate().map(|(i, &v)| f(v, r.data[i % n])).collect();
        let t = Tensor { shape: x.shape.clone(), data };
        self.push(t, op, &[a, b])
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.row_op(a, b, Op::AddRow(a, b), |x, y| x + y)
    }

    /// Multiply every row by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.row_op(a, b, Op::MulRow(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s: T = c(s);
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s: T = c(s);
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.piecewise(a, None, Op::Relu(a), |x, _| (x > T::zero()) as u8, |k, x, _| if k == 1 { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), |x| x.ln())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.piecewise(
            a,
            None,
            Op::Abs(a),
            |x, _| {
                if x > T::zero() {
                    2
                } else if x < T::zero() {
                    0
                } else {
                    1
                }
            },
            |k, x, _| sign::<T>(k) * x,
        )
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h): (T, T) = (c(lo), c(hi));
        let decide = move |x: T, _| {
            if x < l {
                0
            } else if x > h {
                2
            } else {
                1
            }
        };
        self.piecewise(a, None, Op::Clamp(a, l, h), decide, move |k, x, _| match k {
            0 => l,
            1 => x,
            _ => h,
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        self.push(Tensor::new(vec![1], vec![s]), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        self.push(t, Op::Reshape(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        assert!(start + len <= n);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&x.data[r * n + start..r * n + start + len]);
        }
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols { a, start, len }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                let x = self.value(p);
                assert_eq!(x.rows(), m);
                data.extend_from_slice(x.row(r));
            }
        }
        self.push(Tensor::new(vec![m, n], data), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let n = x.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        self.push(Tensor::new(vec![idx.len(), n], data), Op::SelectRows { a, idx: idx.to_vec() }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), n);
            m += x.rows();
            data.extend_from_slice(&x.data);
        }
        self.push(Tensor::new(vec![m, n], data), Op::ConcatRows(parts.to_vec()), parts)
    }

    fn softmax_data(x: &Tensor<T>, log: bool) -> Vec<T> {
        let n = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for r in x.data.chunks(n) {
            let mx = r.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = r.iter().map(|&v| (v - mx).exp()).sum();
            if log {
                let lz = z.ln() + mx;
                out.extend(r.iter().map(|&v| v - lz));
            } else {
                out.extend(r.iter().map(|&v| (v - mx).exp() / z));
            }
        }
        out
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor { shape: x.shape.clone(), data: Self::softmax_data(x, false) };
        self.push(t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor { shape: x.shape.clone(), data: Self::softmax_data(x, true) };
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Per-row normalization followed by `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        let nt: T = c(n as f64);
        for r in xv.data.chunks(n) {
            let mu = r.iter().copied().sum::<T>() / nt;
            let var = r.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nt;
            let is = T::one() / (var + c(eps)).sqrt();
            inv.push(is);
            for (j, &v) in r.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor { shape: xv.shape.clone(), data: out };
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv }, &[x, gamma, beta])
    }

    /// 2-D convolution of a `[cin,h,w]` map with weights
    /// `[cout, cin·k·k]` and bias `[cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let s = self.shape(x).to_vec();
        let geo = ConvGeom::new(s[0], s[1], s[2], k, stride, pad);
        let cout = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], geo.cin * k * k, "conv weight shape");
        let p = geo.ho * geo.wo;
        let mut cols = vec![T::zero(); geo.cin * k * k * p];
        let xd = &self.nodes[x.0].value.data;
        geo.for_each_tap(|ci, xi| cols[ci] = xd[xi]);
        let mut out = vec![T::zero(); cout * p];
        let wd = &self.nodes[w.0].value.data;
        matmul(wd, &cols, cout, geo.cin * k * k, p, false, false, &mut out, T::zero());
        let bd = &self.nodes[b.0].value.data;
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v + bd[o]);
        }
        let t = Tensor::new(vec![cout, geo.ho, geo.wo], out);
        self.push(t, Op::Conv2d { x, w, b, geo, cols }, &[x, w, b])
    }

    /// Weighted gathers from a `[channels, plane]` source. Output row `r`
    /// is `Σ weight · src[:, index]` over taps `offsets[r]..offsets[r+1]`,
    /// giving shape `[rows, channels]`.
    pub fn gather(&mut self, src: Var, offsets: Vec<usize>, taps: Vec<(usize, T)>) -> Var {
        let s = self.shape(src).to_vec();
        let channels = s[0];
        let plane: usize = s[1..].iter().product();
        let rows = offsets.len() - 1;
        let sd = &self.nodes[src.0].value.data;
        let mut out = vec![T::zero(); rows * channels];
        for r in 0..rows {
            let o = &mut out[r * channels..(r + 1) * channels];
            for &(idx, wt) in &taps[offsets[r]..offsets[r + 1]] {
                for (ch, v) in o.iter_mut().enumerate() {
                    *v = *v + wt * sd[ch * plane + idx];
                }
            }
        }
        let t = Tensor::new(vec![rows, channels], out);
        self.push(t, Op::Gather { src, offsets, taps, channels, plane }, &[src])
    }

    /// Elements at flat indices, as a vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let data = idx.iter().map(|&i| x.data[i]).collect();
        self.push(Tensor::new(vec![idx.len()], data), Op::Pick { a, idx: idx.to_vec() }, &[a])
    }

    /// Accumulate d(root)/d(node) for every node; `root` must be a scalar.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(g);
    }

    fn backprop(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, ta, tb } => {
                // C = op(A)·op(B): dop(A) = dC·op(B)^T, dop(B) = op(A)^T·dC
                let (ad, bd) = (&val(a).data, &val(b).data);
                self.acc(grads, a, |g| {
                    if ta {
                        // stored A is [k,m]: dA = op(B)·dC^T
                        matmul(bd, gy, k, n, m, tb, true, g, T::one());
                    } else {
                        matmul(gy, bd, m, n, k, false, !tb, g, T::one());
                    }
                });
                self.acc(grads, b, |g| {
                    if tb {
                        // stored B is [n,k]: dB = dC^T·op(A)
                        matmul(gy, ad, n, m, k, true, ta, g, T::one());
                    } else {
                        matmul(ad, gy, k, m, n, !ta, false, g, T::one());
                    }
                });
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (ad, bd) = (&val(a).data, &val(b).data);
                self.acc(grads, a, |g| {
                    for t in 0..batch {
                        matmul(&gy[t * m * n..], &bd[t * k * n..], m, n, k, false, true, &mut g[t * m * k..(t + 1) * m * k], T::one());
                    }
                });
                self.acc(grads, b, |g| {
                    for t in 0..batch {
                        matmul(&ad[t * m * k..], &gy[t * m * n..], k, m, n, true, false, &mut g[t * k * n..(t + 1) * k * n], T::one());
                    }
                });
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |g| add_into(g, gy));
                self.acc(grads, b, |g| add_into(g, gy));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |g| add_into(g, gy));
                self.acc(grads, b, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g - d));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (&val(a).data, &val(b).data);
                self.acc(grads, a, |g| (0..g.len()).for_each(|j| g[j] = g[j] + gy[j] * bd[j]));
                self.acc(grads, b, |g| (0..g.len()).for_each(|j| g[j] = g[j] + gy[j] * ad[j]));
            }
            &Op::Div(a, b) => {
                let bd = &val(b).data;
                self.acc(grads, a, |g| (0..g.len()).for_each(|j| g[j] = g[j] + gy[j] / bd[j]));
                self.acc(grads, b, |g| (0..g.len()).for_each(|j| g[j] = g[j] - gy[j] * y[j] / bd[j]));
            }
            &Op::AddRow(a, b) => {
                let n = val(b).len();
                self.acc(grads, a, |g| add_into(g, gy));
                self.acc(grads, b, |g| gy.iter().enumerate().for_each(|(j, &d)| g[j % n] = g[j % n] + d));
            }
            &Op::MulRow(a, b) => {
                let (ad, bd) = (&val(a).data, &val(b).data);
                let n = bd.len();
                self.acc(grads, a, |g| (0..g.len()).for_each(|j| g[j] = g[j] + gy[j] * bd[j % n]));
                self.acc(grads, b, |g| gy.iter().enumerate().for_each(|(j, &d)| g[j % n] = g[j % n] + d * ad[j]));
            }
            &Op::Scale(a, s) => self.acc(grads, a, |g| g.iter_mut().zip(gy).for_each(|(g, &d)| *g = *g + d * s)),
            &Op::AddScalar(a) | &Op::Reshape(a) => self.acc(grads, a, |g| add_into(g, gy)),
            &Op::Relu(a) | &Op::Clamp(a, ..) => {
                let br = node.branch.as_deref().expect("piecewise op records its branch");
                self.acc(grads, a, |g| {
                    (0..g.len()).for_each(|j| {
                        if br[j] == 1 {
                            g[j] = g[j] + gy[j]
                        }
                    })
                })
            }
            &Op::Sigmoid(a) => self.acc(grads, a, |g| (0..g.len()).for_each(|j| g[j] = g[j] + gy[j] * y[j] * (T::one() - y[j]))),
            &Op::Exp(a) => self.acc(grads, a, |g| (0..g.len()).for_each(|j| g[j] = g[j] + gy[j] * y[j])),
            &Op::Log(a) => {
                let ad = &val(a).data;
                self.acc(grads, a, |g| (0..g.len()).for_each(|j| g[j] = g[j] + gy[j] / ad[j]))
            }
            &Op::Abs(a) => {
                let br = node.branch.as_deref().expect("piecewise op records its branch");
                self.acc(grads, a, |g| (0..g.len()).for_each(|j| g[j] = g[j] + gy[j] * sign(br[j])))
            }
            &Op::Max(a, b) | &Op::Min(a, b) => {
                let br = node.branch.as_deref().expect("piecewise op records its branch");
                self.acc(grads, a, |g| {
                    (0..g.len()).for_each(|j| {
                        if br[j] == 1 {
                            g[j] = g[j] + gy[j]
                        }
                    })
                });
                self.acc(grads, b, |g| {
                    (0..g.len()).for_each(|j| {
                        if br[j] == 0 {
                            g[j] = g[j] + gy[j]
                        }
                    })
                });
            }
            &Op::Sum(a) => self.acc(grads, a, |g| g.iter_mut().for_each(|g| *g = *g + gy[0])),
            &Op::SliceCols { a, start, len } => {
                let n = val(a).cols();
                self.acc(grads, a, |g| {
                    for (r, row) in gy.chunks(len).enumerate() {
                        add_into(&mut g[r * n + start..r * n + start + len], row);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    self.acc(grads, p, |g| {
                        for (r, row) in g.chunks_mut(w).enumerate() {
                            add_into(row, &gy[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SelectRows { a, idx } => {
                let n = val(*a).cols();
                self.acc(grads, *a, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * n..(i + 1) * n], &gy[r * n..(r + 1) * n]);
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    self.acc(grads, p, |g| add_into(g, &gy[off..off + len]));
                    off += len;
                }
            }
            &Op::Softmax(a) => {
                let n = node.value.cols();
                self.acc(grads, a, |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let dot: T = yr.iter().zip(dr).map(|(&u, &v)| u * v).sum();
                        for j in 0..n {
                            gr[j] = gr[j] + yr[j] * (dr[j] - dot);
                        }
                    }
                })
            }
            &Op::LogSoftmax(a) => {
                let n = node.value.cols();
                self.acc(grads, a, |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let s: T = dr.iter().copied().sum();
                        for j in 0..n {
                            gr[j] = gr[j] + dr[j] - yr[j].exp() * s;
                        }
                    }
                })
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv } => {
                let n = node.value.cols();
                let gd = &val(*gamma).data;
                self.acc(grads, *gamma, |g| (0..gy.len()).for_each(|j| g[j % n] = g[j % n] + gy[j] * xhat[j]));
                self.acc(grads, *beta, |g| (0..gy.len()).for_each(|j| g[j % n] = g[j % n] + gy[j]));
                let nt: T = c(n as f64);
                self.acc(grads, *x, |g| {
                    for (r, &is) in inv.iter().enumerate() {
                        let s = r * n;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dh = gy[s + j] * gd[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * xhat[s + j];
                        }
                        m1 = m1 / nt;
                        m2 = m2 / nt;
                        for j in 0..n {
                            let dh = gy[s + j] * gd[j];
                            g[s + j] = g[s + j] + is * (dh - m1 - xhat[s + j] * m2);
                        }
                    }
                })
            }
            Op::Conv2d { x, w, b, geo, cols } => {
                let p = geo.ho * geo.wo;
                let ck = geo.cin * geo.k * geo.k;
                let cout = val(*w).shape[0];
                self.acc(grads, *b, |g| {
                    for (o, row) in gy.chunks(p).enumerate() {
                        g[o] = g[o] + row.iter().copied().sum();
                    }
                });
                self.acc(grads, *w, |g| matmul(gy, cols, cout, p, ck, false, true, g, T::one()));
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); ck * p];
                    matmul(&val(*w).data, gy, ck, cout, p, true, false, &mut dcols, T::zero());
                    self.acc(grads, *x, |g| geo.for_each_tap(|ci, xi| g[xi] = g[xi] + dcols[ci]));
                }
            }
            Op::Gather { src, offsets, taps, channels, plane } => {
                let (channels, plane) = (*channels, *plane);
                self.acc(grads, *src, |g| {
                    for r in 0..offsets.len() - 1 {
                        let d = &gy[r * channels..(r + 1) * channels];
                        for &(idx, wt) in &taps[offsets[r]..offsets[r + 1]] {
                            for (ch, &dv) in d.iter().enumerate() {
                                g[ch * plane + idx] = g[ch * plane + idx] + wt * dv;
                            }
                        }
                    }
                })
            }
            Op::Pick { a, idx } => self.acc(grads, *a, |g| {
                for (r, &i) in idx.iter().enumerate() {
                    g[i] = g[i] + gy[r];
                }
            }),
        }
    }
}

fn add_into<T: Scalar>(g: &mut [T], d: &[T]) {
    g.iter_mut().zip(d).for_each(|(g, &d)| *g = *g + d);
}

fn sign<T: Scalar>(k: u8) -> T {
    match k {
        0 => -T::one(),
        1 => T::zero(),
        _ => T::one(),
    }
}
