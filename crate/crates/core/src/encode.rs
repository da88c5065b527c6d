//! Geometry and temporal conditioning: Fourier features of receiver offsets,
//! the spatial MLP, temporal/receiver embeddings and token assembly.

use std::f64::consts::PI;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::DeviceLayout;
use crate::net::{Graph, Init, NetError, ParamId, ParamStore, Scalar, Tensor, Var};

pub const DEFAULT_BANDS: usize = 10;
/// Room extent (m) that offsets are divided by before encoding.
pub const DEFAULT_EXTENT: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("need at least one frequency band")]
    NoBands,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("missing token for receiver {receiver}, frame {frame}")]
    MissingToken { receiver: usize, frame: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, EncodeError>;

/// Receiver position relative to the transmitter, with the extent used to normalise it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryVector {
    pub offset: Vector3<f64>,
    /// Division factor; `None` leaves offsets in metres.
    pub extent: Option<f64>,
}

impl GeometryVector {
    pub fn new(offset: Vector3<f64>, extent: Option<f64>) -> Result<Self> {
        if !offset.iter().all(|v| v.is_finite()) {
            return Err(EncodeError::InvalidGeometry("non-finite offset".into()));
        }
        if let Some(e) = extent {
            if !(e > 0.0 && e.is_finite()) {
                return Err(EncodeError::InvalidGeometry(format!("extent must be positive, got {e}")));
            }
        }
        Ok(Self { offset, extent })
    }

    /// One vector per receiver of `layout`.
    pub fn from_layout(layout: &DeviceLayout, extent: Option<f64>) -> Result<Vec<Self>> {
        layout.offsets().into_iter().map(|o| Self::new(o, extent)).collect()
    }

    pub fn normalized(&self) -> Vector3<f64> {
        match self.extent {
            Some(e) => self.offset / e,
            None => self.offset,
        }
    }
}

pub fn fourier_dim(bands: usize) -> usize {
    6 * bands
}

/// `[sin(2^k π p), cos(2^k π p)]` for `k = 0..bands`; band `k` occupies
/// entries `6k..6k+6` as (sin x, sin y, sin z, cos x, cos y, cos z).
pub fn fourier_features(p: &Vector3<f64>, bands: usize) -> Result<Vec<f64>> {
    if bands == 0 {
        return Err(EncodeError::NoBands);
    }
    let mut out = Vec::with_capacity(fourier_dim(bands));
    for k in 0..bands {
        let w = 2f64.powi(k as i32) * PI;
        out.extend(p.iter().map(|&v| (w * v).sin()));
        out.extend(p.iter().map(|&v| (w * v).cos()));
    }
    Ok(out)
}

/// The plain 3-vector zero-padded to `dim` entries.
pub fn raw_padded(p: &Vector3<f64>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (o, v) in out.iter_mut().zip(p.iter()) {
        *o = *v;
    }
    out
}

/// Two-layer perceptron `D_p → D → D` with GELU between the layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SpatialMlp {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d: usize, seed: u64) -> Self {
        Self {
            w1: store.init(&format!("{prefix}.w1"), &[d_in, d], Init::FanInUniform { fan_in: d_in }, seed),
            b1: store.init(&format!("{prefix}.b1"), &[d], Init::Zeros, seed),
            w2: store.init(&format!("{prefix}.w2"), &[d, d], Init::FanInUniform { fan_in: d }, seed),
            b2: store.init(&format!("{prefix}.b2"), &[d], Init::Zeros, seed),
        }
    }
}

/// `e = W₂ GELU(W₁ φ + b₁) + b₂` for each row of `phi`.
pub fn spatial_embed<T: Scalar>(g: &mut Graph<'_, T>, phi: Var, mlp: &SpatialMlp) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.param(mlp.w1), g.param(mlp.b1), g.param(mlp.w2), g.param(mlp.b2));
    if g.value(phi).cols() != g.value(w1).shape()[0] {
        return Err(EncodeError::DimMismatch(format!(
            "phi width {} vs spatial MLP input {}",
            g.value(phi).cols(),
            g.value(w1).shape()[0]
        )));
    }
    let h = g.linear(phi, w1, b1)?;
    let h = g.gelu(h);
    Ok(g.linear(h, w2, b2)?)
}

/// Row `index` of an embedding table.
pub fn lookup<T: Scalar>(table: &Tensor<T>, index: usize) -> Result<&[T]> {
    let (rows, cols) = (table.rows(), table.cols());
    if index >= rows {
        return Err(EncodeError::IndexOutOfRange { index, len: rows });
    }
    Ok(&table.data()[index * cols..(index + 1) * cols])
}

/// Learnable temporal row `r_t`.
pub fn temporal_embed<T: Scalar>(table: &Tensor<T>, t: usize) -> Result<&[T]> {
    lookup(table, t)
}

/// Learnable receiver bias `s_n`.
pub fn receiver_bias<T: Scalar>(table: &Tensor<T>, n: usize) -> Result<&[T]> {
    lookup(table, n)
}

/// Projections and normalisation used to fuse features into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenParams {
    pub w_f: ParamId,
    pub w_e: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl TokenParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, d_f: usize, d: usize, seed: u64) -> Self {
        Self {
            w_f: store.init("token.w_f", &[d_f, d], Init::FanInUniform { fan_in: d_f }, seed),
            w_e: store.init("token.w_e", &[d, d], Init::FanInUniform { fan_in: d }, seed),
            ln_gamma: store.init("token.ln.gamma", &[d], Init::Ones, seed),
            ln_beta: store.init("token.ln.beta", &[d], Init::Zeros, seed),
        }
    }
}

/// `u = LayerNorm(W_f f + W_e e + r + s)` row-wise. Passing `e = None`
/// drops the spatial term.
pub fn build_tokens<T: Scalar>(
    g: &mut Graph<'_, T>,
    params: &TokenParams,
    f: Var,
    e: Option<Var>,
    r: Var,
    s: Var,
) -> Result<Var> {
    let w_f = g.param(params.w_f);
    let mut sum = g.matmul(f, w_f)?;
    if let Some(e) = e {
        let w_e = g.param(params.w_e);
        let pe = g.matmul(e, w_e)?;
        sum = g.add(sum, pe)?;
    }
    sum = g.add(sum, r)?;
    sum = g.add(sum, s)?;
    let (gamma, beta) = (g.param(params.ln_gamma), g.param(params.ln_beta));
    Ok(g.layer_norm(sum, gamma, beta)?)
}

/// Position of token (receiver `n`, frame `t`) in a sequence of `frames` per receiver.
pub fn token_index(n: usize, t: usize, frames: usize) -> usize {
    n * frames + t
}

/// Tokens ordered receiver-major, time ascending within each receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Vec<Vec<T>>,
    pub receivers: usize,
    pub frames: usize,
}

impl<T> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, n: usize, t: usize) -> &[T] {
        &self.tokens[token_index(n, t, self.frames)]
    }
}

/// Flattens a receiver × frame grid of tokens; every cell must be present.
pub fn build_sequence<T: Clone>(grid: &[Vec<Option<Vec<T>>>]) -> Result<TokenSequence<T>> {
    let receivers = grid.len();
    let frames = grid.first().map_or(0, Vec::len);
    let mut tokens = Vec::with_capacity(receivers * frames);
    for (n, row) in grid.iter().enumerate() {
        if row.len() != frames {
            return Err(EncodeError::DimMismatch(format!(
                "receiver {n} has {} frames, expected {frames}",
                row.len()
            )));
        }
        for (t, cell) in row.iter().enumerate() {
            let tok = cell
                .as_ref()
                .ok_or(EncodeError::MissingToken { receiver: n, frame: t })?;
            tokens.push(tok.clone());
        }
    }
    Ok(TokenSequence {
        tokens,
        receivers,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn origin_features() {
        let phi = fourier_features(&Vector3::zeros(), 4).unwrap();
        assert_eq!(phi.len(), 24);
        for k in 0..4 {
            assert!(phi[6 * k..6 * k + 3].iter().all(|&v| v == 0.0));
            assert!(phi[6 * k + 3..6 * k + 6].iter().all(|&v| v == 1.0));
        }
        assert_eq!(fourier_features(&Vector3::zeros(), DEFAULT_BANDS).unwrap().len(), 60);
        assert_eq!(fourier_features(&Vector3::zeros(), 0), Err(EncodeError::NoBands));
    }

    #[test]
    fn band_layout_matches_direct_formula() {
        let p = Vector3::new(0.13, -0.42, 0.77);
        let phi = fourier_features(&p, 10).unwrap();
        for k in 0..10 {
            for c in 0..3 {
                let w = 2f64.powi(k as i32) * PI;
                assert!((phi[6 * k + c] - (w * p[c]).sin()).abs() < 1e-15);
                assert!((phi[6 * k + 3 + c] - (w * p[c]).cos()).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn dimension_is_six_k(k in 1usize..16) {
            prop_assert_eq!(fourier_features(&Vector3::new(0.1, 0.2, 0.3), k).unwrap().len(), 6 * k);
        }

        #[test]
        fn period_two(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let a = fourier_features(&Vector3::new(x, y, z), 6).unwrap();
            let b = fourier_features(&Vector3::new(x + 2.0, y + 2.0, z + 2.0), 6).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }

        #[test]
        fn lipschitz_per_band(x in -1.0f64..1.0, dx in -0.01f64..0.01) {
            let k = 10;
            let a = fourier_features(&Vector3::new(x, 0.0, 0.0), k).unwrap();
            let b = fourier_features(&Vector3::new(x + dx, 0.0, 0.0), k).unwrap();
            let bound = 2f64.powi(k as i32 - 1) * PI * dx.abs() + 1e-12;
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= bound);
            }
        }
    }

    #[test]
    fn centimetre_offsets_are_distinguishable() {
        let a = GeometryVector::new(Vector3::new(3.0, 1.0, 0.0), Some(DEFAULT_EXTENT)).unwrap();
        let b = GeometryVector::new(Vector3::new(3.01, 1.0, 0.0), Some(DEFAULT_EXTENT)).unwrap();
        let pa = fourier_features(&a.normalized(), 10).unwrap();
        let pb = fourier_features(&b.normalized(), 10).unwrap();
        assert!(pa.iter().zip(&pb).any(|(u, v)| (u - v).abs() > 1e-6));
        assert!(GeometryVector::new(Vector3::new(f64::NAN, 0.0, 0.0), None).is_err());
        assert!(GeometryVector::new(Vector3::zeros(), Some(0.0)).is_err());
    }

    #[test]
    fn raw_padding() {
        assert_eq!(raw_padded(&Vector3::new(1.0, 2.0, 3.0), 5), vec![1.0, 2.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let mlp = SpatialMlp::init(&mut store, "psi", 6, 4, 0);
        for id in [mlp.w1, mlp.w2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store, false);
        let phi = g.constant(Tensor::from_fn(&[2, 6], |i| i as f64));
        let e = spatial_embed(&mut g, phi, &mlp).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_slice_reproduces_phi_prefix() {
        // First layer = [I; 0] with zero bias: hidden equals the phi prefix
        // (before GELU), which we read back via a graph on the first layer only.
        let (dp, d) = (6, 4);
        let mut store = ParamStore::<f64>::new();
        let mlp = SpatialMlp::init(&mut store, "psi", dp, d, 0);
        let w1 = store.get_mut(mlp.w1);
        w1.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            w1.data_mut()[i * d + i] = 1.0;
        }
        let mut g = Graph::new(&store, false);
        let phi_vals = fourier_features(&Vector3::new(0.1, 0.2, 0.3), 1).unwrap();
        let phi = g.constant(Tensor::new(vec![1, dp], phi_vals.clone()).unwrap());
        let (w, b) = (g.param(mlp.w1), g.param(mlp.b1));
        let h = g.linear(phi, w, b).unwrap();
        for i in 0..d {
            assert_eq!(g.value(h).data()[i], phi_vals[i]);
        }
    }

    #[test]
    fn spatial_mlp_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mlp = SpatialMlp::init(&mut store, "psi", 12, 8, 4);
        store.get_mut(mlp.b1).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.3);
        let phi = Tensor::new(
            vec![3, 12],
            (0..3)
                .flat_map(|i| fourier_features(&Vector3::new(0.1 * i as f64, 0.2, -0.3), 2).unwrap())
                .collect(),
        )
        .unwrap();
        let w = Tensor::from_fn(&[3, 8], |i| ((i * 7) as f64 * 0.3).sin());
        let report = grad_check(
            &store,
            |g| {
                let p = g.constant(phi.clone());
                let e = spatial_embed(g, p, &mlp).map_err(|e| NetError::ShapeMismatch(e.to_string()))?;
                g.weighted_sum(e, &w)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn dim_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let mlp = SpatialMlp::init(&mut store, "psi", 6, 4, 0);
        let mut g = Graph::new(&store, false);
        let phi = g.constant(Tensor::zeros(&[1, 5]));
        assert!(matches!(spatial_embed(&mut g, phi, &mlp), Err(EncodeError::DimMismatch(_))));
    }

    #[test]
    fn table_lookup() {
        let table = Tensor::<f32>::from_fn(&[8, 4], |i| i as f32);
        assert_eq!(temporal_embed(&table, 2).unwrap(), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(
            temporal_embed(&table, 8),
            Err(EncodeError::IndexOutOfRange { index: 8, len: 8 })
        );
        assert_eq!(receiver_bias(&table, 0).unwrap(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sparse_gradient_step_touches_only_used_rows() {
        let mut store = ParamStore::<f64>::new();
        let table = store.init("temporal", &[8, 4], Init::Normal { std: 0.02 }, 1);
        let before = store.get(table).clone();
        let w = Tensor::from_fn(&[2, 4], |i| 1.0 + i as f64);
        let grads = {
            let mut g = Graph::new(&store, true);
            let t = g.param(table);
            let rows = g.gather_rows(t, &[1, 5]).unwrap();
            let out = g.weighted_sum(rows, &w).unwrap();
            let grads = g.backward(out).unwrap();
            grads.param(table).unwrap().clone()
        };
        let p = store.get_mut(table);
        for (v, d) in p.data_mut().iter_mut().zip(grads.data()) {
            *v -= 0.1 * d;
        }
        for r in 0..8 {
            let changed = (0..4).any(|c| p.data()[r * 4 + c] != before.data()[r * 4 + c]);
            assert_eq!(changed, r == 1 || r == 5, "row {r}");
        }
    }

    fn reference_layer_norm(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
    }

    fn token_setup(seed: u64) -> (ParamStore<f64>, TokenParams, [Tensor<f64>; 4]) {
        let (d_f, d, m) = (6, 5, 3);
        let mut store = ParamStore::<f64>::new();
        let tp = TokenParams::init(&mut store, d_f, d, seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let f = rand_t(&[m, d_f]);
        let e = rand_t(&[m, d]);
        let r = rand_t(&[m, d]);
        let s = rand_t(&[m, d]);
        (store, tp, [f, e, r, s])
    }

    #[test]
    fn token_matches_reference() {
        let (store, tp, [f, e, r, s]) = token_setup(3);
        let mut g = Graph::new(&store, false);
        let (fv, ev, rv, sv) = (g.constant(f.clone()), g.constant(e.clone()), g.constant(r.clone()), g.constant(s.clone()));
        let u = build_tokens(&mut g, &tp, fv, Some(ev), rv, sv).unwrap();
        let wf = store.get(tp.w_f);
        let we = store.get(tp.w_e);
        let (d_f, d) = (6, 5);
        for row in 0..3 {
            let mut pre = vec![0.0; d];
            for j in 0..d {
                for i in 0..d_f {
                    pre[j] += f.data()[row * d_f + i] * wf.data()[i * d + j];
                }
                for i in 0..d {
                    pre[j] += e.data()[row * d + i] * we.data()[i * d + j];
                }
                pre[j] += r.data()[row * d + j] + s.data()[row * d + j];
            }
            let expect = reference_layer_norm(&pre);
            for j in 0..d {
                assert!((g.value(u).data()[row * d + j] - expect[j]).abs() < 1e-6);
            }
            let out = &g.value(u).data()[row * d..(row + 1) * d];
            let mean = out.iter().sum::<f64>() / d as f64;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn token_shift_invariance_and_zero_guard() {
        let (store, tp, [f, e, r, s]) = token_setup(5);
        let run = |r: &Tensor<f64>, s: &Tensor<f64>, f: &Tensor<f64>, e: &Tensor<f64>| {
            let mut g = Graph::new(&store, false);
            let (fv, ev, rv, sv) = (g.constant(f.clone()), g.constant(e.clone()), g.constant(r.clone()), g.constant(s.clone()));
            let u = build_tokens(&mut g, &tp, fv, Some(ev), rv, sv).unwrap();
            g.value(u).clone()
        };
        let base = run(&r, &s, &f, &e);
        let shifted = run(&r.map(|v| v + 3.7), &s, &f, &e);
        assert!(base.max_abs_diff(&shifted) < 1e-9);
        let z = |t: &Tensor<f64>| Tensor::zeros(t.shape());
        let zero = run(&z(&r), &z(&s), &z(&f), &z(&e));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_gradients() {
        let (mut store, tp, [f, e, r, s]) = token_setup(7);
        let fid = store.insert("f", f);
        let w = Tensor::from_fn(&[3, 5], |i| ((i * 5) as f64 * 0.7).cos());
        let report = grad_check(
            &store,
            |g| {
                let fv = g.param(fid);
                let (ev, rv, sv) = (g.constant(e.clone()), g.constant(r.clone()), g.constant(s.clone()));
                let u = build_tokens(g, &tp, fv, Some(ev), rv, sv).map_err(|e| NetError::ShapeMismatch(e.to_string()))?;
                g.weighted_sum(u, &w)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn sequence_order() {
        let grid: Vec<Vec<Option<Vec<usize>>>> = (0..3)
            .map(|n| (0..4).map(|t| Some(vec![n, t])).collect())
            .collect();
        let seq = build_sequence(&grid).unwrap();
        assert_eq!(seq.len(), 12);
        for n in 0..3 {
            for t in 0..4 {
                assert_eq!(seq.tokens[token_index(n, t, 4)], vec![n, t]);
                assert_eq!(seq.get(n, t), &[n, t]);
            }
        }
        let single = build_sequence(&[vec![Some(vec![1.0])]]).unwrap();
        assert_eq!(single.len(), 1);
        let mut holes = grid.clone();
        holes[2][3] = None;
        assert_eq!(
            build_sequence(&holes),
            Err(EncodeError::MissingToken { receiver: 2, frame: 3 })
        );
    }
}
