//! Feature Enhancement Module: per-modality self-attention, cross-modal
//! attention and feed-forward refinement.
//!
//! ```text
//! ĥ_T = A_T(f_T)      ĥ_G = A_G(f_G)      ĥ_P = A_P(f_P)
//! f_T* = F_T(A_TV(ĥ_T, ĥ_G))
//! f_G* = F_G(A_VT(ĥ_G, ĥ_T))     f_P* = F_P(A_VT(ĥ_P, ĥ_T))
//! ```
//!
//! Without text, `f_G* = F_G(A_VT(ĥ_G, ĥ_G))`.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Scope, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, AttnArgs, FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore, StoreId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextAttendsTo {
    #[default]
    Global,
    /// Keys/values are ĥ_G followed by ĥ_P.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FemConfig {
    pub residual: bool,
    pub text_attends_to: TextAttendsTo,
}

impl Default for FemConfig {
    fn default() -> Self {
        Self { residual: true, text_attends_to: TextAttendsTo::Global }
    }
}

/// One pre-norm attention stage. Self-attention stages reuse `ln_q` for the keys.
#[derive(Debug, Clone)]
pub struct AttnStage {
    pub ln_q: LayerNorm,
    pub ln_kv: Option<LayerNorm>,
    pub mha: MultiHeadAttention,
}

impl AttnStage {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, cross: bool, rng: &mut R) -> Self {
        Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), cfg.model_dim),
            ln_kv: cross.then(|| LayerNorm::new(store, &format!("{name}.ln_kv"), cfg.model_dim)),
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), cfg, rng),
        }
    }

    fn forward<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, q: Var, kv: Var, residual: bool) -> Var {
        self.forward_masked(t, s, q, kv, residual, None)
    }

    fn forward_masked<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, q: Var, kv: Var, residual: bool, mask: Option<&Mask>) -> Var {
        let qn = self.ln_q.forward(t, s, q);
        let kvn = match &self.ln_kv {
            Some(ln) => ln.forward(t, s, kv),
            None if q == kv => qn,
            None => self.ln_q.forward(t, s, kv),
        };
        let a = self.mha.forward(t, s, qn, kvn, AttnArgs { mask, ..AttnArgs::default() });
        if residual {
            t.add(q, a)
        } else {
            a
        }
    }
}

#[derive(Debug, Clone)]
pub struct Refine {
    pub ln: LayerNorm,
    pub ffn: FeedForward,
}

impl Refine {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self { ln: LayerNorm::new(store, &format!("{name}.ln"), dim), ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, rng) }
    }

    fn forward<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, x: Var, residual: bool) -> Var {
        let h = self.ln.forward(t, s, x);
        let f = self.ffn.forward(t, s, h);
        if residual {
            t.add(x, f)
        } else {
            f
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Global,
    Patch,
}

#[derive(Debug, Clone)]
pub struct Fem {
    pub cfg: FemConfig,
    pub self_t: AttnStage,
    pub self_g: AttnStage,
    pub self_p: AttnStage,
    pub cross_tv: AttnStage,
    pub cross_vt: AttnStage,
    pub refine_t: Refine,
    pub refine_g: Refine,
    pub refine_p: Refine,
}

/// Outputs of one FEM pass on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Enhanced {
    pub text: Var,
    pub global: Var,
    pub patch: Option<Var>,
    /// Self-enhanced text stream, before cross attention.
    pub h_text: Var,
    /// Keys/values the text stream attended to.
    pub h_visual: Var,
    /// Self-enhanced global stream.
    pub h_global: Var,
}

/// Cross-enhanced features of every (text i, image k) pairing, row `i·B + k`.
#[derive(Debug, Clone, Copy)]
pub struct PairFeatures {
    /// First row of the enhanced text.
    pub text: Var,
    pub global: Var,
    pub count: usize,
}

impl Fem {
    pub fn new<R: Rng>(store: &mut ParamStore, attn: AttentionConfig, cfg: FemConfig, rng: &mut R) -> Self {
        let d = attn.model_dim;
        Self {
            cfg,
            self_t: AttnStage::new(store, "fem.self_t", attn, false, rng),
            self_g: AttnStage::new(store, "fem.self_g", attn, false, rng),
            self_p: AttnStage::new(store, "fem.self_p", attn, false, rng),
            cross_tv: AttnStage::new(store, "fem.cross_tv", attn, true, rng),
            cross_vt: AttnStage::new(store, "fem.cross_vt", attn, true, rng),
            refine_t: Refine::new(store, "fem.refine_t", d, rng),
            refine_g: Refine::new(store, "fem.refine_g", d, rng),
            refine_p: Refine::new(store, "fem.refine_p", d, rng),
        }
    }

    pub fn self_enhance<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, f: Var, which: Modality) -> Var {
        let stage = match which {
            Modality::Text => &self.self_t,
            Modality::Global => &self.self_g,
            Modality::Patch => &self.self_p,
        };
        stage.forward(t, s, f, f, self.cfg.residual)
    }

    /// `F_T(A_TV(ĥ_T, ĥ_V, ĥ_V))`.
    pub fn cross_enhance_text<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, h_t: Var, h_v: Var) -> Var {
        let a = self.cross_tv.forward(t, s, h_t, h_v, self.cfg.residual);
        self.refine_t.forward(t, s, a, self.cfg.residual)
    }

    /// `F_V(A_VT(ĥ_V, ĥ_T, ĥ_T))` for the global (`Modality::Global`) or patch stream.
    pub fn cross_enhance_visual<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, h_v: Var, h_t: Var, which: Modality) -> Var {
        let a = self.cross_vt.forward(t, s, h_v, h_t, self.cfg.residual);
        let refine = if which == Modality::Patch { &self.refine_p } else { &self.refine_g };
        refine.forward(t, s, a, self.cfg.residual)
    }

    /// Full pass over raw features. `f_p` is absent on the teacher-only path.
    pub fn forward<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, f_t: Var, f_g: Var, f_p: Option<Var>) -> Enhanced {
        let h_t = self.self_enhance(t, s, f_t, Modality::Text);
        let h_g = self.self_enhance(t, s, f_g, Modality::Global);
        let h_p = f_p.map(|f| self.self_enhance(t, s, f, Modality::Patch));
        let kv = match (self.cfg.text_attends_to, h_p) {
            (TextAttendsTo::Concat, Some(hp)) => t.concat_rows(&[h_g, hp]),
            _ => h_g,
        };
        let text = self.cross_enhance_text(t, s, h_t, kv);
        let global = self.cross_enhance_visual(t, s, h_g, h_t, Modality::Global);
        let patch = h_p.map(|hp| self.cross_enhance_visual(t, s, hp, h_t, Modality::Patch));
        Enhanced { text, global, patch, h_text: h_t, h_visual: kv, h_global: h_g }
    }

    /// Cross stages for all B² pairings of the samples' self-enhanced streams,
    /// batched through masked attention. The diagonal reproduces `forward`.
    pub fn cross_pairs<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, streams: &[Enhanced]) -> PairFeatures {
        let b = streams.len();
        let firsts: Vec<Var> = streams.iter().map(|e| t.slice_rows(e.h_text, 0, 1)).collect();
        let firsts = t.concat_rows(&firsts);
        let q_text = t.gather_rows(firsts, &(0..b * b).map(|r| r / b).collect::<Vec<_>>());
        let visual: Vec<Var> = streams.iter().map(|e| e.h_visual).collect();
        let (visual, vis_spans) = stack(t, &visual);
        let mask = span_mask(b, &vis_spans, |r| r % b);
        let a = self.cross_tv.forward_masked(t, s, q_text, visual, self.cfg.residual, Some(&mask));
        let text = self.refine_t.forward(t, s, a, self.cfg.residual);

        let globals: Vec<Var> = streams.iter().map(|e| e.h_global).collect();
        let globals = t.concat_rows(&globals);
        let q_vis = t.gather_rows(globals, &(0..b * b).map(|r| r % b).collect::<Vec<_>>());
        let texts: Vec<Var> = streams.iter().map(|e| e.h_text).collect();
        let (texts, text_spans) = stack(t, &texts);
        let mask = span_mask(b, &text_spans, |r| r / b);
        let a = self.cross_vt.forward_masked(t, s, q_vis, texts, self.cfg.residual, Some(&mask));
        let global = self.refine_g.forward(t, s, a, self.cfg.residual);
        PairFeatures { text, global, count: b }
    }

    /// Text-free global enhancement: the global stream attends to itself.
    pub fn global_only<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, f_g: Var) -> Var {
        let h_g = self.self_enhance(t, s, f_g, Modality::Global);
        self.cross_enhance_visual(t, s, h_g, h_g, Modality::Global)
    }
}

fn stack<'p>(t: &mut Tape<'p>, blocks: &[Var]) -> (Var, Vec<(usize, usize)>) {
    let mut spans = Vec::with_capacity(blocks.len());
    let mut at = 0;
    for &v in blocks {
        let n = t.shape(v).0;
        spans.push((at, at + n));
        at += n;
    }
    (t.concat_rows(blocks), spans)
}

/// Query row `r` of a B²-row pairing may see only the key span `spans[owner(r)]`.
fn span_mask(b: usize, spans: &[(usize, usize)], owner: impl Fn(usize) -> usize) -> Mask {
    let keys = spans.last().map_or(0, |s| s.1);
    Rc::new(Array2::from_shape_fn((b * b, keys), |(r, j)| {
        let (lo, hi) = spans[owner(r)];
        (lo..hi).contains(&j)
    }))
}

/// Raw and enhanced features of one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureBundle {
    pub f_g: Option<Array2<f64>>,
    pub f_p: Option<Array2<f64>>,
    pub f_t: Option<Array2<f64>>,
    pub f_g_star: Option<Array2<f64>>,
    pub f_p_star: Option<Array2<f64>>,
    pub f_t_star: Option<Array2<f64>>,
}

fn require<'a>(x: &'a Option<Array2<f64>>, name: &str, dim: usize) -> Result<&'a Array2<f64>> {
    let x = x.as_ref().ok_or_else(|| Error::Contract(format!("feature bundle is missing {name}")))?;
    if x.nrows() == 0 || x.ncols() != dim {
        return Err(Error::Shape(format!("{name} is {:?}, expected N×{dim}", x.dim())));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("{name} contains non-finite values")));
    }
    Ok(x)
}

/// Plain-array FEM pass; the raw fields are left as they were.
pub fn fem_forward(bundle: &FeatureBundle, fem: &Fem, store: &ParamStore) -> Result<FeatureBundle> {
    let d = fem.refine_g.ln.gain;
    let dim = store.get(d).ncols();
    let f_g = require(&bundle.f_g, "f_G", dim)?;
    let f_p = require(&bundle.f_p, "f_P", dim)?;
    let f_t = require(&bundle.f_t, "f_T", dim)?;
    if f_g.nrows() != 1 {
        return Err(Error::Shape(format!("f_G must be 1×{dim}, got {:?}", f_g.dim())));
    }
    let mut t = Tape::new();
    let s = Scope::frozen(store, StoreId::Fem);
    let (vt, vg, vp) = (t.constant(f_t.clone()), t.constant(f_g.clone()), t.constant(f_p.clone()));
    let e = fem.forward(&mut t, s, vt, vg, Some(vp));
    let mut out = bundle.clone();
    out.f_t_star = Some(t.value(e.text).clone());
    out.f_g_star = Some(t.value(e.global).clone());
    out.f_p_star = e.patch.map(|p| t.value(p).clone());
    Ok(out)
}

impl Fem {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for st in [&self.self_t, &self.self_g, &self.self_p, &self.cross_tv, &self.cross_vt] {
            ids.extend([st.ln_q.gain, st.ln_q.bias]);
            if let Some(ln) = &st.ln_kv {
                ids.extend([ln.gain, ln.bias]);
            }
            let m = &st.mha;
            for l in [&m.query, &m.key, &m.value, &m.output] {
                ids.extend([l.weight, l.bias]);
            }
        }
        for r in [&self.refine_t, &self.refine_g, &self.refine_p] {
            ids.extend([r.ln.gain, r.ln.bias, r.ffn.up.weight, r.ffn.up.bias, r.ffn.down.weight, r.ffn.down.bias]);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{layer_norm, LN_EPS};
    use crate::params::normal_array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 4;

    fn setup(cfg: FemConfig) -> (ParamStore, Fem) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let fem = Fem::new(&mut store, AttentionConfig::new(D, 2).unwrap(), cfg, &mut rng);
        // Larger weights so that the tests are sensitive to every path.
        for e in store.entries_mut() {
            if e.decay {
                e.value.mapv_inplace(|v| v * 20.0);
            }
        }
        (store, fem)
    }

    fn rand(rows: usize, seed: u64) -> Array2<f64> {
        normal_array(rows, D, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn lin(x: &Array2<f64>, l: &crate::nn::Linear, s: &ParamStore) -> Array2<f64> {
        x.dot(s.get(l.weight)) + s.get(l.bias)
    }

    fn ln(x: &Array2<f64>, l: &LayerNorm, s: &ParamStore) -> Array2<f64> {
        layer_norm(x, s.get(l.gain), s.get(l.bias), LN_EPS).unwrap()
    }

    fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut r in out.rows_mut() {
            let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            r.mapv_inplace(|v| (v - m).exp());
            let z = r.sum();
            r /= z;
        }
        out
    }

    // Head-by-head attention written out independently of the tape.
    fn mha_oracle(xq: &Array2<f64>, xkv: &Array2<f64>, m: &MultiHeadAttention, s: &ParamStore) -> Array2<f64> {
        let (q, k, v) = (lin(xq, &m.query, s), lin(xkv, &m.key, s), lin(xkv, &m.value, s));
        let hd = m.cfg.head_dim;
        let mut joined = Array2::zeros((xq.nrows(), D));
        for h in 0..m.cfg.num_heads {
            let cols = ndarray::s![.., h * hd..(h + 1) * hd];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) / (hd as f64).sqrt();
            joined.slice_mut(cols).assign(&softmax_rows(&scores).dot(&v.slice(cols)));
        }
        lin(&joined, &m.output, s)
    }

    fn stage_oracle(q: &Array2<f64>, kv: &Array2<f64>, st: &AttnStage, s: &ParamStore, res: bool) -> Array2<f64> {
        let qn = ln(q, &st.ln_q, s);
        let kvn = ln(kv, st.ln_kv.as_ref().unwrap_or(&st.ln_q), s);
        let a = mha_oracle(&qn, &kvn, &st.mha, s);
        if res {
            q + &a
        } else {
            a
        }
    }

    fn refine_oracle(x: &Array2<f64>, r: &Refine, s: &ParamStore, res: bool) -> Array2<f64> {
        let h = lin(&ln(x, &r.ln, s), &r.ffn.up, s).mapv(crate::autodiff::gelu);
        let f = lin(&h, &r.ffn.down, s);
        if res {
            x + &f
        } else {
            f
        }
    }

    fn run<'s, F: FnOnce(&mut Tape<'s>, Scope<'s>, &[Var]) -> Var>(store: &'s ParamStore, inputs: &[Array2<f64>], f: F) -> Array2<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, Scope::frozen(store, StoreId::Fem), &vars);
        t.value(out).clone()
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn single_row_self_attention_is_value_path() {
        let (store, fem) = setup(FemConfig { residual: false, ..Default::default() });
        let f = rand(1, 1);
        let out = run(&store, std::slice::from_ref(&f), |t, s, v| fem.self_enhance(t, s, v[0], Modality::Global));
        let st = &fem.self_g;
        let expected = lin(&lin(&ln(&f, &st.ln_q, &store), &st.mha.value, &store), &st.mha.output, &store);
        close(&out, &expected, 1e-12);
    }

    #[test]
    fn self_enhance_shapes_and_oracle() {
        let (store, fem) = setup(FemConfig::default());
        for n in [1, 2, 5] {
            let f = rand(n, n as u64);
            let out = run(&store, std::slice::from_ref(&f), |t, s, v| fem.self_enhance(t, s, v[0], Modality::Patch));
            assert_eq!(out.dim(), (n, D));
            if n == 2 {
                close(&out, &stage_oracle(&f, &f, &fem.self_p, &store, true), 1e-12);
            }
        }
    }

    #[test]
    fn single_visual_key_gives_every_text_row_the_same_value() {
        let (store, fem) = setup(FemConfig { residual: false, ..Default::default() });
        let (ht, hg) = (rand(3, 2), rand(1, 3));
        let out = run(&store, &[ht, hg], |t, s, v| fem.cross_tv.forward(t, s, v[0], v[1], false));
        for r in 1..3 {
            close(&out.row(r).to_owned().insert_axis(ndarray::Axis(0)), &out.row(0).to_owned().insert_axis(ndarray::Axis(0)), 1e-12);
        }
    }

    #[test]
    fn cross_enhance_text_oracle() {
        let (store, fem) = setup(FemConfig::default());
        for nt in [1, 2, 4] {
            let (ht, hg) = (rand(nt, 4), rand(1, 5));
            let out = run(&store, &[ht.clone(), hg.clone()], |t, s, v| fem.cross_enhance_text(t, s, v[0], v[1]));
            assert_eq!(out.dim(), (nt, D));
            let expected = refine_oracle(&stage_oracle(&ht, &hg, &fem.cross_tv, &store, true), &fem.refine_t, &store, true);
            close(&out, &expected, 1e-12);
        }
    }

    #[test]
    fn cross_enhance_visual_oracle_and_single_text_key() {
        let (store, fem) = setup(FemConfig::default());
        let (hp, ht1, ht) = (rand(3, 6), rand(1, 7), rand(2, 8));
        let pre = run(&store, &[hp.clone(), ht1], |t, s, v| fem.cross_vt.forward(t, s, v[0], v[1], false));
        for r in 1..3 {
            for j in 0..D {
                assert!((pre[[r, j]] - pre[[0, j]]).abs() < 1e-12);
            }
        }
        let g = run(&store, &[rand(1, 9), ht.clone()], |t, s, v| fem.cross_enhance_visual(t, s, v[0], v[1], Modality::Global));
        assert_eq!(g.dim(), (1, D));
        let p = run(&store, &[hp.clone(), ht.clone()], |t, s, v| fem.cross_enhance_visual(t, s, v[0], v[1], Modality::Patch));
        let expected = refine_oracle(&stage_oracle(&hp, &ht, &fem.cross_vt, &store, true), &fem.refine_p, &store, true);
        close(&p, &expected, 1e-12);
    }

    fn bundle() -> FeatureBundle {
        FeatureBundle { f_g: Some(rand(1, 10)), f_p: Some(rand(3, 11)), f_t: Some(rand(2, 12)), ..Default::default() }
    }

    #[test]
    fn fem_forward_matches_composed_oracle() {
        let (store, fem) = setup(FemConfig::default());
        let b = bundle();
        let out = fem_forward(&b, &fem, &store).unwrap();
        assert_eq!(out.f_g, b.f_g);
        assert_eq!(out.f_p, b.f_p);
        assert_eq!(out.f_t, b.f_t);
        assert_eq!(out, fem_forward(&b, &fem, &store).unwrap());

        let (ft, fg, fp) = (b.f_t.as_ref().unwrap(), b.f_g.as_ref().unwrap(), b.f_p.as_ref().unwrap());
        let ht = stage_oracle(ft, ft, &fem.self_t, &store, true);
        let hg = stage_oracle(fg, fg, &fem.self_g, &store, true);
        let hp = stage_oracle(fp, fp, &fem.self_p, &store, true);
        let t_star = refine_oracle(&stage_oracle(&ht, &hg, &fem.cross_tv, &store, true), &fem.refine_t, &store, true);
        let g_star = refine_oracle(&stage_oracle(&hg, &ht, &fem.cross_vt, &store, true), &fem.refine_g, &store, true);
        let p_star = refine_oracle(&stage_oracle(&hp, &ht, &fem.cross_vt, &store, true), &fem.refine_p, &store, true);
        close(out.f_t_star.as_ref().unwrap(), &t_star, 1e-12);
        close(out.f_g_star.as_ref().unwrap(), &g_star, 1e-12);
        close(out.f_p_star.as_ref().unwrap(), &p_star, 1e-12);
    }

    #[test]
    fn zero_weights_without_residual_give_zero_features() {
        let (mut store, fem) = setup(FemConfig { residual: false, ..Default::default() });
        for e in store.entries_mut() {
            if !e.name.contains(".ln") {
                e.value.fill(0.0);
            }
        }
        let out = fem_forward(&bundle(), &fem, &store).unwrap();
        for f in [&out.f_t_star, &out.f_g_star, &out.f_p_star] {
            assert!(f.as_ref().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn text_stream_ignores_patches_unless_concat() {
        let (store, fem) = setup(FemConfig::default());
        let a = bundle();
        let mut b = a.clone();
        b.f_p = Some(rand(5, 99));
        let (oa, ob) = (fem_forward(&a, &fem, &store).unwrap(), fem_forward(&b, &fem, &store).unwrap());
        assert_eq!(oa.f_t_star, ob.f_t_star);

        let (store, fem) = setup(FemConfig { text_attends_to: TextAttendsTo::Concat, ..Default::default() });
        let (oa, ob) = (fem_forward(&a, &fem, &store).unwrap(), fem_forward(&b, &fem, &store).unwrap());
        assert_ne!(oa.f_t_star, ob.f_t_star);
    }

    #[test]
    fn missing_field_is_a_contract_error() {
        let (store, fem) = setup(FemConfig::default());
        let mut b = bundle();
        b.f_t = None;
        assert!(matches!(fem_forward(&b, &fem, &store), Err(Error::Contract(_))));
    }

    #[test]
    fn pair_diagonal_matches_forward_and_off_diagonal_mixes() {
        for cfg in [FemConfig::default(), FemConfig { text_attends_to: TextAttendsTo::Concat, ..Default::default() }] {
            let (store, fem) = setup(cfg);
            let mut t = Tape::new();
            let sc = Scope::frozen(&store, StoreId::Fem);
            let samples: Vec<(Var, Var, Var)> = (0..3)
                .map(|i| (t.constant(rand(2 + i, 10 + i as u64)), t.constant(rand(1, 20 + i as u64)), t.constant(rand(3, 30 + i as u64))))
                .collect();
            let streams: Vec<Enhanced> = samples.iter().map(|&(ft, fg, fp)| fem.forward(&mut t, sc, ft, fg, Some(fp))).collect();
            let pairs = fem.cross_pairs(&mut t, sc, &streams);
            let (pt, pg) = (t.value(pairs.text).clone(), t.value(pairs.global).clone());
            for (i, e) in streams.iter().enumerate() {
                let r = i * 3 + i;
                let text0 = t.value(e.text).row(0).to_owned();
                assert!((&pt.row(r) - &text0).iter().all(|v| v.abs() < 1e-12));
                assert!((&pg.row(r) - &t.value(e.global).row(0)).iter().all(|v| v.abs() < 1e-12));
            }
            // Text 0 against image 1 equals a direct pass over that pairing.
            let direct_t = fem.cross_enhance_text(&mut t, sc, streams[0].h_text, streams[1].h_visual);
            let direct_g = fem.cross_enhance_visual(&mut t, sc, streams[1].h_global, streams[0].h_text, Modality::Global);
            assert!((&pt.row(1) - &t.value(direct_t).row(0)).iter().all(|v| v.abs() < 1e-12));
            assert!((&pg.row(1) - &t.value(direct_g).row(0)).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn every_parameter_is_listed_once() {
        let (store, fem) = setup(FemConfig::default());
        let mut ids: Vec<usize> = fem.param_ids().iter().map(|p| p.0).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), store.len());
    }
}
