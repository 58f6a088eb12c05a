//! Transformer building blocks shared by the encoders, the feature
//! enhancement module and the decoder.
//!
//! Layers are parameter layouts (a handful of [`ParamId`]s) plus a `forward`
//! that records onto a [`Tape`]. The free functions at the bottom wrap the
//! same code paths for plain-array callers.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Scope, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, StoreId};

pub type Tensor2D = Array2<f64>;

pub const LN_EPS: f64 = 1e-5;
/// Hidden width multiplier of every feed-forward network.
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if model_dim == 0 || num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        Ok(Self { model_dim, num_heads, head_dim: model_dim / num_heads })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = store.normal(format!("{name}.weight"), input, output, rng);
        let bias = store.bias(format!("{name}.bias"), output, rng);
        Self { weight, bias }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, x: Var) -> Var {
        let w = t.bind(s, self.weight);
        let b = t.bind(s, self.bias);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.constant(format!("{name}.gain"), 1, dim, 1.0);
        let bias = store.constant(format!("{name}.bias"), 1, dim, 0.0);
        Self { gain, bias }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, x: Var) -> Var {
        let g = t.bind(s, self.gain);
        let b = t.bind(s, self.bias);
        t.layer_norm(x, g, b, LN_EPS)
    }
}

/// `softmax(Q Kᵀ / √d [+ bias]) V` with an optional mask; returns (output, weights).
pub fn attend<'p>(
    t: &mut Tape<'p>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
    bias: Option<Var>,
) -> (Var, Var) {
    let d = t.shape(q).1 as f64;
    let scores = t.matmul_t(q, k);
    let mut scores = t.scale(scores, 1.0 / d.sqrt());
    if let Some(b) = bias {
        scores = t.add(scores, b);
    }
    let weights = t.softmax(scores, mask);
    (t.matmul(weights, v), weights)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Optional extras for one attention call.
#[derive(Default)]
pub struct AttnArgs<'a> {
    pub mask: Option<&'a Mask>,
    /// One additive logit bias per head.
    pub head_bias: Option<&'a [Var]>,
    /// Receives the per-head attention weight matrices.
    pub trace: Option<&'a mut Vec<Var>>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        Self {
            cfg,
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
        }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, x_q: Var, x_kv: Var, args: AttnArgs<'_>) -> Var {
        let q = self.query.forward(t, s, x_q);
        let k = self.key.forward(t, s, x_kv);
        let v = self.value.forward(t, s, x_kv);
        let hd = self.cfg.head_dim;
        let AttnArgs { mask, head_bias, mut trace } = args;
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let (qh, kh, vh) = if self.cfg.num_heads == 1 {
                (q, k, v)
            } else {
                (t.slice_cols(q, h * hd, hd), t.slice_cols(k, h * hd, hd), t.slice_cols(v, h * hd, hd))
            };
            let (out, w) = attend(t, qh, kh, vh, mask, head_bias.map(|b| b[h]));
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(w);
            }
            heads.push(out);
        }
        let joined = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
        self.output.forward(t, s, joined)
    }
}

/// Two affine maps with GELU between, hidden width `FFN_MULT · D`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, FFN_MULT * dim, rng),
            down: Linear::new(store, &format!("{name}.down"), FFN_MULT * dim, dim, rng),
        }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, x: Var) -> Var {
        let h = self.up.forward(t, s, x);
        let h = t.gelu(h);
        self.down.forward(t, s, h)
    }
}

/// Pre-norm block: `x' = x + MSA(LN(x))`, `out = x' + FFN(LN(x'))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), cfg.model_dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.model_dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.model_dim, rng),
        }
    }

    pub fn forward<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, x: Var, args: AttnArgs<'_>) -> Var {
        let h = self.ln_attn.forward(t, s, x);
        let a = self.attn.forward(t, s, h, h, args);
        let a = t.maybe_dropout(a);
        let x1 = t.add(x, a);
        let h = self.ln_ffn.forward(t, s, x1);
        let f = self.ffn.forward(t, s, h);
        let f = t.maybe_dropout(f);
        t.add(x1, f)
    }

    /// Ids of every array that feeds a sublayer (everything except the norms).
    pub fn sublayer_params(&self) -> Vec<ParamId> {
        let a = &self.attn;
        vec![
            a.query.weight,
            a.query.bias,
            a.key.weight,
            a.key.bias,
            a.value.weight,
            a.value.bias,
            a.output.weight,
            a.output.bias,
            self.ffn.up.weight,
            self.ffn.up.bias,
            self.ffn.down.weight,
            self.ffn.down.bias,
        ]
    }
}

/// Lower-triangular mask: query `i` may attend to keys `0..=i`.
pub fn causal_mask(n: usize) -> Mask {
    Rc::new(Array2::from_shape_fn((n, n), |(i, j)| j <= i))
}

fn check_finite(name: &str, x: &Tensor2D) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} contains non-finite values")))
    }
}

/// Plain-array scaled dot-product attention. Returns `(output, weights)`.
pub fn scaled_dot_product_attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    causal: bool,
) -> Result<(Tensor2D, Tensor2D)> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "attention shapes q {:?} k {:?} v {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if q.is_empty() || k.is_empty() || v.is_empty() {
        return Err(Error::Shape("attention inputs must be non-empty".into()));
    }
    if causal && q.nrows() > k.nrows() {
        return Err(Error::Shape("causal attention needs at least as many keys as queries".into()));
    }
    check_finite("q", q)?;
    check_finite("k", k)?;
    check_finite("v", v)?;
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant_ref(q), t.constant_ref(k), t.constant_ref(v));
    let mask = causal.then(|| Rc::new(Array2::from_shape_fn((q.nrows(), k.nrows()), |(i, j)| j <= i)));
    let (out, w) = attend(&mut t, qv, kv, vv, mask.as_ref(), None);
    Ok((t.value(out).clone(), t.value(w).clone()))
}

pub fn layer_norm(x: &Tensor2D, gain: &Tensor2D, bias: &Tensor2D, eps: f64) -> Result<Tensor2D> {
    if eps <= 0.0 {
        return Err(Error::Precondition("layer_norm eps must be positive".into()));
    }
    if gain.dim() != (1, x.ncols()) || bias.dim() != (1, x.ncols()) {
        return Err(Error::Shape("layer_norm gain/bias must be 1×D".into()));
    }
    let mut t = Tape::new();
    let (xv, g, b) = (t.constant_ref(x), t.constant_ref(gain), t.constant_ref(bias));
    let y = t.layer_norm(xv, g, b, eps);
    Ok(t.value(y).clone())
}

pub fn multi_head_attention(
    x_q: &Tensor2D,
    x_kv: &Tensor2D,
    mha: &MultiHeadAttention,
    store: &ParamStore,
) -> Result<Tensor2D> {
    let d = mha.cfg.model_dim;
    if x_q.ncols() != d || x_kv.ncols() != d {
        return Err(Error::Shape(format!("expected {d} columns, got {} and {}", x_q.ncols(), x_kv.ncols())));
    }
    check_finite("x_q", x_q)?;
    check_finite("x_kv", x_kv)?;
    let mut t = Tape::new();
    let s = Scope::frozen(store, StoreId::Scratch);
    let (q, kv) = (t.constant_ref(x_q), t.constant_ref(x_kv));
    let y = mha.forward(&mut t, s, q, kv, AttnArgs::default());
    Ok(t.value(y).clone())
}

pub fn transformer_block(x: &Tensor2D, block: &TransformerBlock, store: &ParamStore) -> Result<Tensor2D> {
    let d = block.attn.cfg.model_dim;
    if x.ncols() != d || x.nrows() == 0 {
        return Err(Error::Shape(format!("expected N×{d}, got {:?}", x.dim())));
    }
    check_finite("x", x)?;
    let mut t = Tape::new();
    let s = Scope::frozen(store, StoreId::Scratch);
    let xv = t.constant_ref(x);
    let y = block.forward(&mut t, s, xv, AttnArgs::default());
    Ok(t.value(y).clone())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vector lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::Numeric("cosine similarity of a zero or non-finite vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
