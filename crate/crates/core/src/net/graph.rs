use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use super::{NetError, Result};
use crate::rng::stream_rng;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_width(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn col_rows(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    /// Calls `f(src, dst, len)` for every contiguous run of input values copied
    /// into the column matrix: one run per (output pixel, kernel row), covering
    /// the kernel columns that fall inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, cin, pad) = (self.kernel, self.cin, self.pad as isize);
        let cw = self.col_width();
        for b in 0..self.batch {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    let x0 = (ox * self.stride) as isize - pad;
                    let kx0 = (-x0).max(0) as usize;
                    let kx1 = ((self.w as isize - x0).min(k as isize)).max(0) as usize;
                    if kx0 >= kx1 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let ix = (x0 + kx0 as isize) as usize;
                        let src = ((b * self.h + iy as usize) * self.w + ix) * cin;
                        let dst = row * cw + (ky * k + kx0) * cin;
                        f(src, dst, (kx1 - kx0) * cin);
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Conv { x: Var, w: Var, b: Var, cols: Vec<T>, geom: ConvGeom },
    MeanPool { x: Var, batch: usize, spatial: usize },
    Reshape { x: Var },
    Gather { src: Var, idx: Vec<usize> },
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    MseJoints { pred: Var, target: Vec<T> },
    WeightedSum { x: Var, w: Vec<T> },
    Scale { x: Var, c: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Tape of tensor operations supporting reverse-mode differentiation.
pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    nodes: Vec<Node<T>>,
    train: bool,
    dropout_seed: u64,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.of(*v))
    }

    /// Gradient for every touched parameter, in parameter order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(p, v)| self.of(*v).map(|g| (*p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NetError::ShapeMismatch(msg))
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    // tanh via one exp; libm tanh is several times slower and GELU runs on
    // every conv activation. Clamped so exp cannot overflow.
    let e = (T::lit(-2.0) * u.abs().min(T::lit(20.0))).exp();
    let t = ((one - e) / (one + e)).copysign(u);
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * a * x * x);
    (y, dy)
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph reading parameters from `params`.
    pub fn new(params: &'p ParamStore<T>, train: bool) -> Self {
        Self {
            params: Some(params),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            train,
            dropout_seed: 0,
        }
    }

    /// Graph without a parameter store; only constants can enter.
    pub fn detached(train: bool) -> Self {
        Self {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            train,
            dropout_seed: 0,
        }
    }

    /// Seed for dropout masks; each mask is keyed by (seed, node index).
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_seed = seed;
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Node holding parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, &[]);
        self.param_vars.insert(id, v);
        v
    }

    /// `a · b` where `a` is `[..., k]` and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.numel() != xv.cols() {
            return shape_err(format!("bias {:?} for {:?}", bv.shape(), xv.shape()));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }, &[x, b]))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c }, &[x])
    }

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return shape_err(format!("layer norm affine for width {n}"));
        }
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let rows = xv.rows();
        let nf = T::lit(n as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = xv.clone();
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out.data_mut()[r * n + j] = h * g[j] + bt[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2-D convolution on NHWC input `[B, H, W, Cin]` with weights
    /// `[k·k·Cin, Cout]` (rows ordered ky, kx, c) and bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return shape_err(format!("conv input must be NHWC, got {s:?}"));
        }
        let (batch, h, wd, cin) = (s[0], s[1], s[2], s[3]);
        let wv = self.value(w);
        if wv.shape().len() != 2 || wv.shape()[0] != kernel * kernel * cin {
            return shape_err(format!("conv weight {:?} for {cin} input channels", wv.shape()));
        }
        let cout = wv.shape()[1];
        if self.value(b).numel() != cout {
            return shape_err("conv bias size".into());
        }
        if h + 2 * pad < kernel || wd + 2 * pad < kernel || stride == 0 {
            return shape_err(format!("input {h}x{wd} too small for kernel {kernel}"));
        }
        let geom = ConvGeom {
            batch,
            h,
            w: wd,
            cin,
            cout,
            kernel,
            stride,
            pad,
            ho: (h + 2 * pad - kernel) / stride + 1,
            wo: (wd + 2 * pad - kernel) / stride + 1,
        };
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_width()];
        let xd = xv.data();
        geom.for_each_tap(|src, dst, n| cols[dst..dst + n].copy_from_slice(&xd[src..src + n]));
        let mut out = vec![T::zero(); geom.col_rows() * cout];
        T::gemm(geom.col_rows(), geom.col_width(), cout, &cols, false, wv.data(), false, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let t = Tensor::new(vec![batch, geom.ho, geom.wo, cout], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, cols, geom }, &[x, w, b]))
    }

    /// Mean over all dimensions between the first and the last: `[B, ..., C] → [B, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 2 {
            return shape_err(format!("mean pool needs rank ≥ 2, got {s:?}"));
        }
        let (batch, c) = (s[0], s[s.len() - 1]);
        let spatial = xv.numel() / (batch * c).max(1);
        let mut out = vec![T::zero(); batch * c];
        let inv = T::one() / T::lit(spatial.max(1) as f64);
        for b in 0..batch {
            for p in 0..spatial {
                let base = (b * spatial + p) * c;
                for ch in 0..c {
                    out[b * c + ch] += xv.data()[base + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new(vec![batch, c], out)?;
        Ok(self.push(t, Op::MeanPool { x, batch, spatial }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Rows of `src` (viewed as `[rows, cols]`) selected by `idx`: `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (rows, cols) = (sv.rows(), sv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NetError::IndexOutOfRange { index: bad, len: rows });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&sv.data()[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    /// Full multi-head self-attention on packed projections `[B, S, 3D]`
    /// (queries, keys, values along the last axis). Returns `[B, S, D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        let s = v.shape();
        if s.len() != 3 || s[2] % 3 != 0 || heads == 0 || (s[2] / 3) % heads != 0 {
            return shape_err(format!("attention input {s:?} with {heads} heads"));
        }
        let (batch, seq, d) = (s[0], s[1], s[2] / 3);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let x = v.data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let at = |b: usize, t: usize, part: usize, h: usize| ((b * seq + t) * 3 + part) * d + h * dh;
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let q = &x[at(b, i, 0, h)..at(b, i, 0, h) + dh];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = T::neg_infinity();
                    for j in 0..seq {
                        let kj = &x[at(b, j, 1, h)..at(b, j, 1, h) + dh];
                        let sc = q.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        p[j] = sc;
                        max = max.max(sc);
                    }
                    let mut z = T::zero();
                    for pj in p.iter_mut() {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    for pj in p.iter_mut() {
                        *pj /= z;
                    }
                    let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let vj = &x[at(b, j, 2, h)..at(b, j, 2, h) + dh];
                        for (oo, &vv) in o.iter_mut().zip(vj) {
                            *oo += p[j] * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, seq, d], out)?;
        Ok(self.push(t, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// Attention probabilities `[B, heads, S, S]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let mut rng = stream_rng(self.dropout_seed, &[0xd0, self.nodes.len() as u64]);
        let keep = T::lit(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = xv.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over joints of squared Euclidean error; last axis must be 3.
    pub fn mse_joints(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() || pv.cols() != 3 || pv.numel() == 0 {
            return shape_err(format!("mse {:?} vs {:?}", pv.shape(), target.shape()));
        }
        let n = T::lit((pv.numel() / 3) as f64);
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseJoints {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        ))
    }

    /// `Σ x_i w_i` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != w.numel() {
            return shape_err("weighted sum size".into());
        }
        let s = xv.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum::<T>();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                w: w.data().to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward needs a scalar".into());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                    acc(grads, *a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    acc(grads, *b, Tensor::new(bv.shape().to_vec(), db).expect("shape"));
                }
            }
            Op::AddBias { x, b } => {
                if self.needs(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let n = bv.numel();
                    let mut db = Tensor::zeros(bv.shape());
                    for row in gd.chunks(n) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let mut dx = xv.clone();
                for (d, (&xx, &gg)) in dx.data_mut().iter_mut().zip(xv.data().iter().zip(gd)) {
                    *d = gg * gelu_parts(xx).1;
                }
                acc(grads, *x, dx);
            }
            Op::Scale { x, c } => acc(grads, *x, g.map(|v| v * *c)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let n = gam.len();
                let rows = inv_std.len();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Tensor::zeros(self.value(*gamma).shape());
                    let mut db = Tensor::zeros(self.value(*beta).shape());
                    for r in 0..rows {
                        for j in 0..n {
                            let gg = gd[r * n + j];
                            dg.data_mut()[j] += gg * xhat[r * n + j];
                            db.data_mut()[j] += gg;
                        }
                    }
                    if self.needs(*gamma) {
                        acc(grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        acc(grads, *beta, db);
                    }
                }
                if self.needs(*x) {
                    let nf = T::lit(n as f64);
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let mut dh = vec![T::zero(); n];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dh[j] = gd[r * n + j] * gam[j];
                            s1 += dh[j];
                            s2 += dh[j] * xhat[r * n + j];
                        }
                        for j in 0..n {
                            dx.data_mut()[r * n + j] =
                                inv_std[r] / nf * (nf * dh[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Conv { x, w, b, cols, geom } => {
                let (rows, cw, cout) = (geom.col_rows(), geom.col_width(), geom.cout);
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); cw * cout];
                    T::gemm(cw, rows, cout, cols, true, gd, false, &mut dw, false);
                    acc(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw).expect("shape"));
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(self.value(*b).shape());
                    for row in gd.chunks(cout) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, db);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); rows * cw];
                    T::gemm(rows, cout, cw, gd, false, self.value(*w).data(), true, &mut dcols, false);
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let dxd = dx.data_mut();
                    geom.for_each_tap(|src, dst, n| {
                        for c in 0..n {
                            dxd[src + c] += dcols[dst + c];
                        }
                    });
                    acc(grads, *x, dx);
                }
            }
            Op::MeanPool { x, batch, spatial } => {
                let c = g.cols();
                let inv = T::one() / T::lit((*spatial).max(1) as f64);
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for b in 0..*batch {
                    for p in 0..*spatial {
                        let base = (b * spatial + p) * c;
                        for ch in 0..c {
                            dx.data_mut()[base + ch] = gd[b * c + ch] * inv;
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Reshape { x } => {
                let t = g.clone().reshaped(self.value(*x).shape()).expect("same size");
                acc(grads, *x, t);
            }
            Op::Gather { src, idx } => {
                let sv = self.value(*src);
                let cols = sv.cols();
                let mut ds = Tensor::zeros(sv.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ds.data_mut()[i * cols + c] += gd[r * cols + c];
                    }
                }
                acc(grads, *src, ds);
            }
            Op::Attention { qkv, heads, probs } => {
                let v = self.value(*qkv);
                let s = v.shape();
                let (batch, seq, d) = (s[0], s[1], s[2] / 3);
                let heads = *heads;
                let dh = d / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let x = v.data();
                let mut dx = Tensor::zeros(s);
                let dxd = dx.data_mut();
                let at = |b: usize, t: usize, part: usize, h: usize| ((b * seq + t) * 3 + part) * d + h * dh;
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let go = &gd[(b * seq + i) * d + h * dh..][..dh];
                            let mut dot = T::zero();
                            for j in 0..seq {
                                let vj = at(b, j, 2, h);
                                dp[j] = go.iter().zip(&x[vj..vj + dh]).map(|(&a, &c)| a * c).sum();
                                dot += p[j] * dp[j];
                                for (e, &gg) in go.iter().enumerate() {
                                    dxd[vj + e] += p[j] * gg;
                                }
                            }
                            let qi = at(b, i, 0, h);
                            for j in 0..seq {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let kj = at(b, j, 1, h);
                                for e in 0..dh {
                                    dxd[qi + e] += ds * x[kj + e];
                                    dxd[kj + e] += ds * x[qi + e];
                                }
                            }
                        }
                    }
                }
                acc(grads, *qkv, dx);
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                acc(grads, *x, dx);
            }
            Op::MseJoints { pred, target } => {
                let pv = self.value(*pred);
                let n = T::lit((pv.numel() / 3) as f64);
                let k = gd[0] * T::lit(2.0) / n;
                let mut dp = pv.clone();
                for (d, &t) in dp.data_mut().iter_mut().zip(target) {
                    *d = (*d - t) * k;
                }
                acc(grads, *pred, dp);
            }
            Op::WeightedSum { x, w } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (d, &ww) in dx.data_mut().iter_mut().zip(w) {
                    *d = gd[0] * ww;
                }
                acc(grads, *x, dx);
            }
        }
    }
}
