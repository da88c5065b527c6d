use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use super::{NetError, Result};
use crate::encode::{self, build_tokens, fourier_dim, spatial_embed, SpatialMlp, TokenParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub joints: usize,
    pub receivers: usize,
    /// Frames per window (`T`).
    pub seq_len: usize,
    /// Channels of the first conv block; each further block doubles them.
    pub conv_base: usize,
    pub conv_blocks: usize,
    pub in_channels: usize,
    /// Feature-map height and width.
    pub map_size: usize,
    /// Fourier bands `K`.
    pub bands: usize,
    /// Offsets are divided by this before encoding; `None` keeps metres.
    pub extent: Option<f64>,
    pub head_hidden: Vec<usize>,
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            joints: 17,
            receivers: 3,
            seq_len: 8,
            conv_base: 4,
            conv_blocks: 4,
            in_channels: 3,
            map_size: 64,
            bands: encode::DEFAULT_BANDS,
            extent: Some(encode::DEFAULT_EXTENT),
            head_hidden: vec![1024, 512],
        }
    }

    /// Full-size profile: 6 layers, 8 heads, width 512, FFN 2048, 224×224 maps.
    pub fn full() -> Self {
        Self {
            d_model: 512,
            layers: 6,
            heads: 8,
            ffn_dim: 2048,
            dropout: 0.1,
            conv_base: 64,
            map_size: 224,
            ..Self::desk()
        }
    }

    /// Width of the pooled conv feature `f`.
    pub fn d_feature(&self) -> usize {
        self.conv_base << (self.conv_blocks.saturating_sub(1))
    }

    pub fn d_geometry(&self) -> usize {
        fourier_dim(self.bands)
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.receivers * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        let positive = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("joints", self.joints),
            ("receivers", self.receivers),
            ("seq_len", self.seq_len),
            ("conv_base", self.conv_base),
            ("conv_blocks", self.conv_blocks),
            ("in_channels", self.in_channels),
            ("bands", self.bands),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.map_size < 16 {
            return bad(format!("map size {} below 16", self.map_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.head_hidden.contains(&0) {
            return bad("head hidden sizes must be positive".into());
        }
        if let Some(e) = self.extent {
            if !(e > 0.0) {
                return bad(format!("extent must be positive, got {e}"));
            }
        }
        Ok(())
    }
}

/// How device geometry enters the token sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Fourier features of receiver offsets through the spatial MLP.
    Conditioned,
    /// No spatial term; the layout never enters the forward pass.
    NoAlign,
    /// Raw normalised offsets, zero-padded to the Fourier width, through the spatial MLP.
    NoSpatialPe,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Conditioned, Mode::NoAlign, Mode::NoSpatialPe];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Conditioned => "conditioned",
            Mode::NoAlign => "no_align",
            Mode::NoSpatialPe => "no_spatial_pe",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| NetError::InvalidConfig(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl LayerIds {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, i: usize, d: usize, ffn: usize, seed: u64) -> Self {
        let name = |s: &str| format!("layer{i}.{s}");
        let w = |fan_in: usize| Init::FanInUniform { fan_in };
        Self {
            ln1_gamma: store.init(&name("ln1.gamma"), &[d], Init::Ones, seed),
            ln1_beta: store.init(&name("ln1.beta"), &[d], Init::Zeros, seed),
            w_qkv: store.init(&name("attn.w_qkv"), &[d, 3 * d], w(d), seed),
            b_qkv: store.init(&name("attn.b_qkv"), &[3 * d], Init::Zeros, seed),
            w_o: store.init(&name("attn.w_o"), &[d, d], w(d), seed),
            b_o: store.init(&name("attn.b_o"), &[d], Init::Zeros, seed),
            ln2_gamma: store.init(&name("ln2.gamma"), &[d], Init::Ones, seed),
            ln2_beta: store.init(&name("ln2.beta"), &[d], Init::Zeros, seed),
            w1: store.init(&name("ffn.w1"), &[d, ffn], w(d), seed),
            b1: store.init(&name("ffn.b1"), &[ffn], Init::Zeros, seed),
            w2: store.init(&name("ffn.w2"), &[ffn, d], w(ffn), seed),
            b2: store.init(&name("ffn.b2"), &[d], Init::Zeros, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelIds {
    /// (weight `[9·cin, cout]`, bias) per conv block.
    pub conv: Vec<(ParamId, ParamId)>,
    pub spatial: SpatialMlp,
    pub token: TokenParams,
    pub temporal: ParamId,
    pub receiver: ParamId,
    pub layers: Vec<LayerIds>,
    /// (weight, bias) per head layer, last one producing `J·3`.
    pub head: Vec<(ParamId, ParamId)>,
}

/// Network inputs for `size` windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub size: usize,
    /// `[size·N_r·T, H, W, C]`, images ordered (sample, receiver, frame).
    pub maps: Tensor<T>,
    /// Receiver offsets relative to the transmitter (m), ordered (sample, receiver).
    pub offsets: Vec<Vector3<f64>>,
}

/// The pose network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ids: ModelIds,
}

/// Stack of stride-2 3×3 conv + GELU blocks followed by global average pooling.
pub fn conv_encoder<T: Scalar>(g: &mut Graph<'_, T>, blocks: &[(ParamId, ParamId)], x: Var) -> Result<Var> {
    let mut h = x;
    for &(w, b) in blocks {
        let (w, b) = (g.param(w), g.param(b));
        h = g.conv2d(h, w, b, 3, 2, 1)?;
        h = g.gelu(h);
    }
    g.mean_pool(h)
}

/// One pre-LN layer: `x + MSA(LN x)` then `x + FFN(LN x)`.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<'_, T>,
    ids: &LayerIds,
    x: Var,
    heads: usize,
    dropout: f64,
) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(NetError::ShapeMismatch(format!("transformer input {shape:?}")));
    }
    let p = |g: &mut Graph<'_, T>, id| g.param(id);
    let (g1, b1) = (p(g, ids.ln1_gamma), p(g, ids.ln1_beta));
    let h = g.layer_norm(x, g1, b1)?;
    let (wq, bq) = (p(g, ids.w_qkv), p(g, ids.b_qkv));
    let qkv = g.linear(h, wq, bq)?;
    let attn = g.attention(qkv, heads)?;
    let (wo, bo) = (p(g, ids.w_o), p(g, ids.b_o));
    let a = g.linear(attn, wo, bo)?;
    let x = g.add(x, a)?;
    let (g2, b2) = (p(g, ids.ln2_gamma), p(g, ids.ln2_beta));
    let h = g.layer_norm(x, g2, b2)?;
    let (w1, bb1) = (p(g, ids.w1), p(g, ids.b1));
    let h = g.linear(h, w1, bb1)?;
    let h = g.gelu(h);
    let h = g.dropout(h, dropout);
    let (w2, bb2) = (p(g, ids.w2), p(g, ids.b2));
    let f = g.linear(h, w2, bb2)?;
    Ok((g.add(x, f)?, attn))
}

/// Full-attention pre-LN transformer over `[B, S, D]`.
pub fn transformer_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    layers: &[LayerIds],
    x: Var,
    heads: usize,
    dropout: f64,
) -> Result<Var> {
    let mut h = x;
    for ids in layers {
        h = transformer_layer(g, ids, h, heads, dropout)?.0;
    }
    Ok(h)
}

/// MLP with GELU between layers, no activation after the last.
pub fn pose_head<T: Scalar>(g: &mut Graph<'_, T>, layers: &[(ParamId, ParamId)], z: Var) -> Result<Var> {
    let mut h = z;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let (w, b) = (g.param(w), g.param(b));
        h = g.linear(h, w, b)?;
        if i + 1 < layers.len() {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let mut conv = Vec::new();
        let mut cin = config.in_channels;
        for i in 0..config.conv_blocks {
            let cout = config.conv_base << i;
            let fan_in = 9 * cin;
            conv.push((
                s.init(&format!("conv{i}.w"), &[fan_in, cout], Init::FanInUniform { fan_in }, seed),
                s.init(&format!("conv{i}.b"), &[cout], Init::Zeros, seed),
            ));
            cin = cout;
        }
        let d = config.d_model;
        let spatial = SpatialMlp::init(s, "spatial", config.d_geometry(), d, seed);
        let token = TokenParams::init(s, config.d_feature(), d, seed);
        let temporal = s.init("temporal", &[config.seq_len, d], Init::Normal { std: 0.02 }, seed);
        let receiver = s.init("receiver", &[config.receivers, d], Init::Normal { std: 0.02 }, seed);
        let layers = (0..config.layers)
            .map(|i| LayerIds::init(s, i, d, config.ffn_dim, seed))
            .collect();
        let mut head = Vec::new();
        let mut width = config.receivers * d;
        let outs: Vec<usize> = config
            .head_hidden
            .iter()
            .copied()
            .chain(std::iter::once(config.joints * 3))
            .collect();
        for (i, &o) in outs.iter().enumerate() {
            // The output layer starts at zero so the untrained model predicts the target mean.
            let init = if i + 1 == outs.len() {
                Init::Zeros
            } else {
                Init::FanInUniform { fan_in: width }
            };
            head.push((
                s.init(&format!("head{i}.w"), &[width, o], init, seed),
                s.init(&format!("head{i}.b"), &[o], Init::Zeros, seed),
            ));
            width = o;
        }
        Ok(Self {
            config,
            params: store,
            ids: ModelIds {
                conv,
                spatial,
                token,
                temporal,
                receiver,
                layers,
                head,
            },
        })
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Per-(sample, receiver) geometry rows `[B·N_r, D_p]` for `mode`
    /// (`None` for the no-align ablation).
    pub fn geometry_rows(&self, offsets: &[Vector3<f64>], mode: Mode) -> Result<Option<Tensor<T>>> {
        let dp = self.config.d_geometry();
        let mut rows = Vec::with_capacity(offsets.len() * dp);
        for o in offsets {
            let gv = encode::GeometryVector::new(*o, self.config.extent)
                .map_err(|e| NetError::InvalidConfig(e.to_string()))?;
            let p = gv.normalized();
            let v = match mode {
                Mode::NoAlign => return Ok(None),
                Mode::Conditioned => {
                    encode::fourier_features(&p, self.config.bands).map_err(|e| NetError::InvalidConfig(e.to_string()))?
                }
                Mode::NoSpatialPe => encode::raw_padded(&p, dp),
            };
            rows.extend(v.into_iter().map(T::lit));
        }
        if mode == Mode::NoAlign {
            return Ok(None);
        }
        Tensor::new(vec![offsets.len(), dp], rows).map(Some)
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        let c = &self.config;
        let expect = [batch.size * c.tokens_per_sample(), c.map_size, c.map_size, c.in_channels];
        if batch.maps.shape() != expect {
            return Err(NetError::ShapeMismatch(format!(
                "maps {:?}, expected {expect:?}",
                batch.maps.shape()
            )));
        }
        if batch.offsets.len() != batch.size * c.receivers {
            return Err(NetError::ShapeMismatch(format!(
                "{} offsets for {} samples × {} receivers",
                batch.offsets.len(),
                batch.size,
                c.receivers
            )));
        }
        Ok(())
    }

    /// Builds the forward pass; returns (decoder input `[B·T, N_r·D]`,
    /// normalised pose `[B, T, J, 3]`).
    pub fn forward_with_features(&self, g: &mut Graph<'_, T>, batch: &Batch<T>, mode: Mode) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let c = &self.config;
        let (b, n_r, t_len, d) = (batch.size, c.receivers, c.seq_len, c.d_model);
        let n_tok = b * n_r * t_len;

        let x = g.constant(batch.maps.clone());
        let f = conv_encoder(g, &self.ids.conv, x)?;

        let e = match self.geometry_rows(&batch.offsets, mode)? {
            None => None,
            Some(rows) => {
                let phi = g.constant(rows);
                let e = spatial_embed(g, phi, &self.ids.spatial).map_err(|e| NetError::ShapeMismatch(e.to_string()))?;
                let idx: Vec<usize> = (0..n_tok).map(|i| i / t_len).collect();
                Some(g.gather_rows(e, &idx)?)
            }
        };
        let temporal = g.param(self.ids.temporal);
        let t_idx: Vec<usize> = (0..n_tok).map(|i| i % t_len).collect();
        let r = g.gather_rows(temporal, &t_idx)?;
        let receiver = g.param(self.ids.receiver);
        let n_idx: Vec<usize> = (0..n_tok).map(|i| (i / t_len) % n_r).collect();
        let s = g.gather_rows(receiver, &n_idx)?;
        let tokens = build_tokens(g, &self.ids.token, f, e, r, s).map_err(|e| NetError::ShapeMismatch(e.to_string()))?;

        let seq = g.reshape(tokens, &[b, n_r * t_len, d])?;
        let out = transformer_forward(g, &self.ids.layers, seq, c.heads, c.dropout)?;

        // Regroup per frame: row (b, t) holds receivers 0..N_r in order.
        let per_frame: Vec<usize> = (0..b)
            .flat_map(|bi| {
                (0..t_len).flat_map(move |ti| (0..n_r).map(move |ni| bi * n_r * t_len + ni * t_len + ti))
            })
            .collect();
        let rows = g.gather_rows(out, &per_frame)?;
        let z = g.reshape(rows, &[b * t_len, n_r * d])?;
        let y = pose_head(g, &self.ids.head, z)?;
        let y = g.reshape(y, &[b, t_len, c.joints, 3])?;
        Ok((z, y))
    }

    /// Normalised pose `[B, T, J, 3]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &Batch<T>, mode: Mode) -> Result<Var> {
        Ok(self.forward_with_features(g, batch, mode)?.1)
    }

    /// Inference without dropout; returns (decoder inputs, normalised poses).
    pub fn infer(&self, batch: &Batch<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new(&self.params, false);
        let (z, y) = self.forward_with_features(&mut g, batch, mode)?;
        Ok((g.value(z).clone(), g.value(y).clone()))
    }
}
