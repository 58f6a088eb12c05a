//! Description decoder: prefix-conditioned transformer with greedy and beam
//! decoding.
//!
//! The input sequence is `[proj_T(f_T*) ; proj_G(f_G*) ; embed(y) + pos]`.
//! Prefix rows see only the prefix; token rows see the whole prefix plus
//! earlier tokens.

use std::cmp::Ordering;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mask, Scope, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, AttnArgs, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore, StoreId};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    /// Maximum number of generated tokens (EOS included).
    pub max_length: usize,
    pub beam_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { num_layers: 2, max_length: 30, beam_size: 4 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.max_length == 0 || self.beam_size == 0 {
            return Err(Error::Config(format!("decoder sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated ids after BOS; ends with EOS iff `terminated_by == Eos`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub terminated_by: Termination,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub attn: AttentionConfig,
    pub vocab_size: usize,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub cond_text: Linear,
    pub cond_global: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub output: Linear,
}

/// Prefix-LM mask over `prefix + tokens` positions.
pub fn prefix_mask(prefix: usize, tokens: usize) -> Mask {
    let n = prefix + tokens;
    Rc::new(Array2::from_shape_fn((n, n), |(i, j)| j < prefix || (i >= prefix && j <= i)))
}

fn log_softmax(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: DecoderConfig, attn: AttentionConfig, vocab_size: usize, rng: &mut R) -> Self {
        let d = attn.model_dim;
        Self {
            cfg,
            attn,
            vocab_size,
            token_embed: store.normal("decoder.token_embed", vocab_size, d, rng),
            pos_embed: store.normal("decoder.pos_embed", cfg.max_length + 1, d, rng),
            cond_text: Linear::new(store, "decoder.cond_text", d, d, rng),
            cond_global: Linear::new(store, "decoder.cond_global", d, d, rng),
            blocks: (0..cfg.num_layers)
                .map(|l| TransformerBlock::new(store, &format!("decoder.block{l}"), attn, rng))
                .collect(),
            output: Linear::new(store, "decoder.output", d, vocab_size, rng),
        }
    }

    /// One logit row per target position; row j scores the token at j + 1.
    pub fn teacher_forced<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, target: &[usize], f_t: Var, f_g: Var) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Contract("decoder target is empty".into()));
        }
        if target[0] != BOS {
            return Err(Error::Contract(format!("decoder target must begin with BOS, got {}", target[0])));
        }
        if target.len() > self.cfg.max_length + 1 {
            return Err(Error::Shape(format!(
                "decoder target of {} positions exceeds max_length + 1 = {}",
                target.len(),
                self.cfg.max_length + 1
            )));
        }
        if let Some(bad) = target.iter().find(|&&y| y >= self.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let pt = self.cond_text.forward(t, s, f_t);
        let pg = self.cond_global.forward(t, s, f_g);
        let prefix = t.shape(pt).0 + 1;
        let m = target.len();
        let table = t.bind(s, self.token_embed);
        let emb = t.gather_rows(table, target);
        let pos_table = t.bind(s, self.pos_embed);
        let positions: Vec<usize> = (0..m).collect();
        let pos = t.gather_rows(pos_table, &positions);
        let y = t.add(emb, pos);
        let mut x = t.concat_rows(&[pt, pg, y]);
        let mask = prefix_mask(prefix, m);
        for block in &self.blocks {
            x = block.forward(t, s, x, AttnArgs { mask: Some(&mask), ..Default::default() });
        }
        let h = t.slice_rows(x, prefix, m);
        Ok(self.output.forward(t, s, h))
    }

    /// Plain-array teacher-forced logits.
    pub fn logits(&self, store: &ParamStore, target: &[usize], f_t: &Array2<f64>, f_g: &Array2<f64>) -> Result<Array2<f64>> {
        let mut t = Tape::new();
        let (vt, vg) = (t.constant(f_t.clone()), t.constant(f_g.clone()));
        let l = self.teacher_forced(&mut t, Scope::frozen(store, StoreId::Decoder), target, vt, vg)?;
        Ok(t.value(l).clone())
    }

    /// Log-probabilities of the token following `prefix` (which starts with BOS).
    pub fn next_log_probs(&self, store: &ParamStore, prefix: &[usize], f_t: &Array2<f64>, f_g: &Array2<f64>) -> Result<Vec<f64>> {
        let l = self.logits(store, prefix, f_t, f_g)?;
        Ok(log_softmax(l.row(l.nrows() - 1)))
    }

    pub fn generate(
        &self,
        store: &ParamStore,
        f_t: &Array2<f64>,
        f_g: &Array2<f64>,
        mode: DecodeMode,
    ) -> Result<GenerationResult> {
        match mode {
            DecodeMode::Greedy => self.greedy(store, f_t, f_g),
            DecodeMode::Beam => self.beam(store, f_t, f_g, self.cfg.beam_size),
        }
    }

    pub fn greedy(&self, store: &ParamStore, f_t: &Array2<f64>, f_g: &Array2<f64>) -> Result<GenerationResult> {
        let mut seq = vec![BOS];
        let mut log_prob = 0.0;
        while seq.len() <= self.cfg.max_length {
            let lp = self.next_log_probs(store, &seq, f_t, f_g)?;
            let next = argmax(&lp);
            log_prob += lp[next];
            seq.push(next);
            if next == EOS {
                return Ok(GenerationResult { tokens: seq.split_off(1), log_prob, terminated_by: Termination::Eos });
            }
        }
        Ok(GenerationResult { tokens: seq.split_off(1), log_prob, terminated_by: Termination::MaxLength })
    }

    /// Best complete hypothesis over beam widths `1..=width`, so that widening
    /// the beam can never lower the returned score.
    pub fn beam(&self, store: &ParamStore, f_t: &Array2<f64>, f_g: &Array2<f64>, width: usize) -> Result<GenerationResult> {
        let mut best: Option<Hyp> = None;
        for k in 1..=width.max(1) {
            let h = self.beam_once(store, f_t, f_g, k)?;
            if best.as_ref().is_none_or(|b| rank(&h, b) == Ordering::Less) {
                best = Some(h);
            }
        }
        let h = best.expect("at least one width");
        let terminated_by = if h.tokens.last() == Some(&EOS) { Termination::Eos } else { Termination::MaxLength };
        Ok(GenerationResult { tokens: h.tokens[1..].to_vec(), log_prob: h.score, terminated_by })
    }

    /// Standard beam search of a single width without length normalisation.
    fn beam_once(&self, store: &ParamStore, f_t: &Array2<f64>, f_g: &Array2<f64>, width: usize) -> Result<Hyp> {
        let mut alive = vec![Hyp { tokens: vec![BOS], score: 0.0 }];
        let mut done: Vec<Hyp> = Vec::new();
        for _ in 0..self.cfg.max_length {
            let mut cands = Vec::with_capacity(alive.len() * self.vocab_size);
            for h in &alive {
                let lp = self.next_log_probs(store, &h.tokens, f_t, f_g)?;
                for (tok, l) in lp.into_iter().enumerate() {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    cands.push(Hyp { tokens, score: h.score + l });
                }
            }
            cands.sort_by(rank);
            alive.clear();
            for c in cands {
                if alive.len() == width {
                    break;
                }
                if c.tokens.last() == Some(&EOS) {
                    done.push(c);
                } else {
                    alive.push(c);
                }
            }
            done.sort_by(rank);
            // Scores only decrease, so nothing alive can overtake the best finished hypothesis.
            match (done.first(), alive.first()) {
                (Some(d), Some(a)) if d.score >= a.score => break,
                (_, None) => break,
                _ => {}
            }
        }
        done.extend(alive);
        done.sort_by(rank);
        Ok(done.swap_remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{layer_norm, LN_EPS};
    use crate::params::normal_array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;
    const V: usize = 9;

    fn setup(max_length: usize, scale: f64) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { num_layers: 2, max_length, beam_size: 4 };
        let dec = Decoder::new(&mut store, cfg, AttentionConfig::new(D, 2).unwrap(), V, &mut rng);
        for e in store.entries_mut() {
            if e.decay {
                e.value.mapv_inplace(|v| v * scale);
            }
        }
        (store, dec)
    }

    fn ctx(seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (normal_array(2, D, 1.0, &mut rng), normal_array(1, D, 1.0, &mut rng))
    }

    #[test]
    fn logits_have_one_row_per_position() {
        let (store, dec) = setup(6, 1.0);
        let (ft, fg) = ctx(1);
        for m in 1..=4 {
            let target: Vec<usize> = std::iter::once(BOS).chain(4..4 + m - 1).collect();
            assert_eq!(dec.logits(&store, &target, &ft, &fg).unwrap().dim(), (m, V));
        }
        assert!(matches!(dec.logits(&store, &[], &ft, &fg), Err(Error::Contract(_))));
        assert!(matches!(dec.logits(&store, &[5, 4], &ft, &fg), Err(Error::Contract(_))));
    }

    #[test]
    fn changing_a_token_only_affects_later_rows() {
        let (store, dec) = setup(6, 20.0);
        let (ft, fg) = ctx(2);
        let a = dec.logits(&store, &[BOS, 4, 5, 6, 7], &ft, &fg).unwrap();
        let b = dec.logits(&store, &[BOS, 4, 8, 6, 7], &ft, &fg).unwrap();
        for j in 0..5 {
            let same = a.row(j) == b.row(j);
            assert_eq!(same, j < 2, "row {j}");
        }
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

    // Full-matrix recomputation of the forward pass with explicit masking.
    fn oracle(dec: &Decoder, s: &ParamStore, target: &[usize], ft: &Array2<f64>, fg: &Array2<f64>) -> Array2<f64> {
        let lin = |x: &Array2<f64>, l: &Linear| x.dot(s.get(l.weight)) + s.get(l.bias);
        let p = ft.nrows() + 1;
        let n = p + target.len();
        let mut x = Array2::zeros((n, D));
        x.slice_mut(ndarray::s![0..p - 1, ..]).assign(&lin(ft, &dec.cond_text));
        x.slice_mut(ndarray::s![p - 1..p, ..]).assign(&lin(fg, &dec.cond_global));
        for (j, &y) in target.iter().enumerate() {
            let row = &s.get(dec.token_embed).row(y) + &s.get(dec.pos_embed).row(j);
            x.row_mut(p + j).assign(&row);
        }
        let hd = D / 2;
        for b in &dec.blocks {
            let h = layer_norm(&x, s.get(b.ln_attn.gain), s.get(b.ln_attn.bias), LN_EPS).unwrap();
            let (q, k, v) = (lin(&h, &b.attn.query), lin(&h, &b.attn.key), lin(&h, &b.attn.value));
            let mut joined = Array2::zeros((n, D));
            for head in 0..2 {
                let c = ndarray::s![.., head * hd..(head + 1) * hd];
                let mut sc = q.slice(c).dot(&k.slice(c).t()) / (hd as f64).sqrt();
                for i in 0..n {
                    for j in 0..n {
                        let visible = if i < p { j < p } else { j < p || j <= i };
                        if !visible {
                            sc[[i, j]] = f64::NEG_INFINITY;
                        }
                    }
                }
                joined.slice_mut(c).assign(&softmax_rows(&sc).dot(&v.slice(c)));
            }
            x = &x + &lin(&joined, &b.attn.output);
            let h = layer_norm(&x, s.get(b.ln_ffn.gain), s.get(b.ln_ffn.bias), LN_EPS).unwrap();
            let f = lin(&lin(&h, &b.ffn.up).mapv(crate::autodiff::gelu), &b.ffn.down);
            x = &x + &f;
        }
        lin(&x.slice(ndarray::s![p.., ..]).to_owned(), &dec.output)
    }

    #[test]
    fn three_token_logits_match_oracle() {
        let (store, dec) = setup(6, 10.0);
        let (ft, fg) = ctx(3);
        let target = [BOS, 5, 7];
        let got = dec.logits(&store, &target, &ft, &fg).unwrap();
        let want = oracle(&dec, &store, &target, &ft, &fg);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn beam_one_equals_greedy_and_respects_max_length() {
        for max_length in [2, 5] {
            let (store, dec) = setup(max_length, 30.0);
            for seed in 0..8 {
                let (ft, fg) = ctx(100 + seed);
                let g = dec.greedy(&store, &ft, &fg).unwrap();
                let b = dec.beam(&store, &ft, &fg, 1).unwrap();
                assert_eq!(g.tokens, b.tokens);
                assert!((g.log_prob - b.log_prob).abs() < 1e-12);
                assert!(g.tokens.len() <= max_length);
                assert_eq!(g.tokens.last() == Some(&EOS), g.terminated_by == Termination::Eos);
            }
        }
    }

    #[test]
    fn wider_beams_never_score_lower() {
        let (store, dec) = setup(4, 30.0);
        for seed in 0..6 {
            let (ft, fg) = ctx(200 + seed);
            let scores: Vec<f64> = (1..=4).map(|k| dec.beam(&store, &ft, &fg, k).unwrap().log_prob).collect();
            for w in scores.windows(2) {
                assert!(w[1] >= w[0], "{scores:?}");
            }
        }
    }

    #[test]
    fn beam_score_equals_teacher_forced_log_prob() {
        let (store, dec) = setup(4, 30.0);
        let (ft, fg) = ctx(300);
        let r = dec.beam(&store, &ft, &fg, 3).unwrap();
        let mut seq = vec![BOS];
        seq.extend(&r.tokens);
        let l = dec.logits(&store, &seq, &ft, &fg).unwrap();
        let lp: f64 = (0..r.tokens.len()).map(|j| log_softmax(l.row(j))[seq[j + 1]]).sum();
        assert!((lp - r.log_prob).abs() < 1e-10);
    }

    #[test]
    fn prefix_mask_layout() {
        let m = prefix_mask(2, 3);
        let expected = [
            [true, true, false, false, false],
            [true, true, false, false, false],
            [true, true, true, false, false],
            [true, true, true, true, false],
            [true, true, true, true, true],
        ];
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[[i, j]], expected[i][j]);
            }
        }
    }
}
