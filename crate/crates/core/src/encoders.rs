//! Vision (teacher/global and student/patch) and text encoders.
//!
//! The teacher and student share [`VisionEncoder`]'s layout; they differ only
//! in which store they read and in their inputs: the global path prepends a
//! learnable class token to the full patch grid, the patch path sees only the
//! retained patches.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scope, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionConfig, AttnArgs, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::patching::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// Learned absolute embeddings added to the inputs.
    #[default]
    Absolute,
    /// Learned per-head attention-logit bias indexed by relative offset.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub model_dim: usize,
    /// Vision depth (teacher and student).
    pub num_layers: usize,
    pub text_layers: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub position_encoding: PositionEncoding,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            num_layers: 4,
            text_layers: 4,
            num_heads: 4,
            patch_size: 8,
            image_size: 64,
            max_tokens: 16,
            vocab_size: 256,
            position_encoding: PositionEncoding::Absolute,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("text_layers", self.text_layers),
            ("num_heads", self.num_heads),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("max_tokens", self.max_tokens),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        AttentionConfig::new(self.model_dim, self.num_heads)?;
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.model_dim, self.num_heads).expect("validated")
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub patch_proj: Linear,
    pub pos_embed: ParamId,
    pub cls_token: ParamId,
    pub rel_bias: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
}

/// Sequence input for one vision forward pass.
struct VisionTokens {
    pixels: Array2<f64>,
    flat: Vec<usize>,
}

fn stack_pixels(patches: &[&Patch], dim: usize) -> Result<VisionTokens> {
    let mut pixels = Array2::zeros((patches.len(), dim));
    let mut flat = Vec::with_capacity(patches.len());
    for (i, p) in patches.iter().enumerate() {
        if p.pixels.len() != dim {
            return Err(Error::Shape(format!("patch has {} values, expected {dim}", p.pixels.len())));
        }
        pixels.row_mut(i).assign(&ndarray::ArrayView1::from(&p.pixels[..]));
        flat.push(p.flat_index);
    }
    Ok(VisionTokens { pixels, flat })
}

impl VisionEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let patch_proj = Linear::new(store, "vision.patch_proj", cfg.patch_dim(), d, rng);
        let pos_embed = store.normal("vision.pos_embed", cfg.num_patches(), d, rng);
        let cls_token = store.normal("vision.cls_token", 1, d, rng);
        let rel_bias = (cfg.position_encoding == PositionEncoding::Relative).then(|| {
            let g = cfg.grid();
            store.normal("vision.rel_bias", cfg.num_heads, 1 + (2 * g - 1) * (2 * g - 1), rng)
        });
        let blocks = (0..cfg.num_layers)
            .map(|l| TransformerBlock::new(store, &format!("vision.block{l}"), cfg.attention(), rng))
            .collect();
        Self { cfg, patch_proj, pos_embed, cls_token, rel_bias, blocks }
    }

    /// Relative offset bucket for each (query, key) pair; `None` marks the class token.
    fn relative_index(&self, cells: &[Option<usize>]) -> Rc<Array2<usize>> {
        let g = self.cfg.grid() as isize;
        let span = 2 * g - 1;
        let n = cells.len();
        Rc::new(Array2::from_shape_fn((n, n), |(i, j)| match (cells[i], cells[j]) {
            (Some(a), Some(b)) => {
                let (ra, ca) = (a as isize / g, a as isize % g);
                let (rb, cb) = (b as isize / g, b as isize % g);
                1 + ((rb - ra + g - 1) * span + (cb - ca + g - 1)) as usize
            }
            _ => 0,
        }))
    }

    fn run_blocks<'p>(
        &self,
        t: &mut Tape<'p>,
        s: Scope<'p>,
        mut x: Var,
        cells: &[Option<usize>],
        mut trace: Option<&mut Vec<Var>>,
    ) -> Var {
        let head_bias: Option<Vec<Var>> = self.rel_bias.map(|id| {
            let table = t.bind(s, id);
            let idx = self.relative_index(cells);
            (0..self.cfg.num_heads).map(|h| t.gather_table(table, h, idx.clone())).collect()
        });
        let last = self.blocks.len().saturating_sub(1);
        for (l, block) in self.blocks.iter().enumerate() {
            let args = AttnArgs {
                mask: None,
                head_bias: head_bias.as_deref(),
                trace: if l == last { trace.as_deref_mut() } else { None },
            };
            x = block.forward(t, s, x, args);
        }
        x
    }

    fn embed<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, tokens: VisionTokens) -> Var {
        let px = t.constant(tokens.pixels);
        let x = self.patch_proj.forward(t, s, px);
        match self.cfg.position_encoding {
            PositionEncoding::Absolute => {
                let table = t.bind(s, self.pos_embed);
                let pos = t.gather_rows(table, &tokens.flat);
                t.add(x, pos)
            }
            PositionEncoding::Relative => x,
        }
    }

    /// Global path: class token + full grid; returns the final class-token row (1×D).
    ///
    /// When `trace` is given it receives the last block's per-head attention weights.
    pub fn encode_global<'p>(
        &self,
        t: &mut Tape<'p>,
        s: Scope<'p>,
        patches: &[Patch],
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if patches.len() != self.cfg.num_patches() {
            return Err(Error::Shape(format!(
                "global encoder expects {} patches, got {}",
                self.cfg.num_patches(),
                patches.len()
            )));
        }
        let refs: Vec<&Patch> = patches.iter().collect();
        let tokens = stack_pixels(&refs, self.cfg.patch_dim())?;
        let mut cells = vec![None];
        cells.extend(tokens.flat.iter().map(|&f| Some(f)));
        let x = self.embed(t, s, tokens);
        let cls = t.bind(s, self.cls_token);
        let seq = t.concat_rows(&[cls, x]);
        let out = self.run_blocks(t, s, seq, &cells, trace);
        Ok(t.slice_rows(out, 0, 1))
    }

    /// Patch path: retained patches only, output rows in input order (N_Ps×D).
    pub fn encode_patches<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, retained: &[&Patch]) -> Result<Var> {
        if retained.is_empty() {
            return Err(Error::Precondition("patch encoder needs at least one patch".into()));
        }
        if let Some(p) = retained.iter().find(|p| p.flat_index >= self.cfg.num_patches()) {
            return Err(Error::Shape(format!("patch flat_index {} outside the grid", p.flat_index)));
        }
        let tokens = stack_pixels(retained, self.cfg.patch_dim())?;
        let cells: Vec<Option<usize>> = tokens.flat.iter().map(|&f| Some(f)).collect();
        let x = self.embed(t, s, tokens);
        Ok(self.run_blocks(t, s, x, &cells, None))
    }

    pub fn block_sublayer_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.sublayer_params()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub rel_bias: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let token_embed = store.normal("text.token_embed", cfg.vocab_size, d, rng);
        let pos_embed = store.normal("text.pos_embed", cfg.max_tokens, d, rng);
        let rel_bias = (cfg.position_encoding == PositionEncoding::Relative)
            .then(|| store.normal("text.rel_bias", cfg.num_heads, 2 * cfg.max_tokens - 1, rng));
        let blocks = (0..cfg.text_layers)
            .map(|l| TransformerBlock::new(store, &format!("text.block{l}"), cfg.attention(), rng))
            .collect();
        Self { cfg, token_embed, pos_embed, rel_bias, blocks }
    }

    /// Encodes `ids` (N_T×D). Sequences longer than `max_tokens` are truncated.
    pub fn encode<'p>(&self, t: &mut Tape<'p>, s: Scope<'p>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Precondition("text encoder needs at least one token".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}; map unknown words to UNK first",
                self.cfg.vocab_size
            )));
        }
        let ids = if ids.len() > self.cfg.max_tokens {
            log::warn!("text of {} tokens truncated to {}", ids.len(), self.cfg.max_tokens);
            &ids[..self.cfg.max_tokens]
        } else {
            ids
        };
        let n = ids.len();
        let table = t.bind(s, self.token_embed);
        let mut x = t.gather_rows(table, ids);
        if self.cfg.position_encoding == PositionEncoding::Absolute {
            let pos_table = t.bind(s, self.pos_embed);
            let positions: Vec<usize> = (0..n).collect();
            let pos = t.gather_rows(pos_table, &positions);
            x = t.add(x, pos);
        }
        let head_bias: Option<Vec<Var>> = self.rel_bias.map(|id| {
            let table = t.bind(s, id);
            let m = self.cfg.max_tokens as isize;
            let idx = Rc::new(Array2::from_shape_fn((n, n), |(i, j)| (j as isize - i as isize + m - 1) as usize));
            (0..self.cfg.num_heads).map(|h| t.gather_table(table, h, idx.clone())).collect()
        });
        for block in &self.blocks {
            x = block.forward(t, s, x, AttnArgs { mask: None, head_bias: head_bias.as_deref(), trace: None });
        }
        Ok(x)
    }

    pub fn block_sublayer_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.sublayer_params()).collect()
    }
}

/// First-token (BOS position) row of the enhanced text features.
pub fn pool_text<'p>(t: &mut Tape<'p>, f_t: Var) -> Var {
    t.slice_rows(f_t, 0, 1)
}

/// Plain-array form of [`pool_text`].
pub fn pool_text_array(f_t: &Array2<f64>) -> Result<Array2<f64>> {
    if f_t.nrows() == 0 {
        return Err(Error::Precondition("pool_text needs at least one row".into()));
    }
    Ok(f_t.slice(ndarray::s![0..1, ..]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use crate::params::StoreId;
    use crate::patching::patchify;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            model_dim: 8,
            num_layers: 2,
            text_layers: 2,
            num_heads: 2,
            patch_size: 4,
            image_size: 8,
            max_tokens: 6,
            vocab_size: 10,
            ..Default::default()
        }
    }

    fn image(seed: usize) -> Image {
        Image::from_fn(8, 8, |y, x| {
            let v = ((y * 5 + x * 3 + seed) % 7) as f64 / 7.0;
            [v, 1.0 - v, 0.5]
        })
    }

    fn vision(cfg: EncoderConfig) -> (ParamStore, VisionEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = VisionEncoder::new(&mut store, cfg, &mut rng);
        (store, enc)
    }

    fn global(store: &ParamStore, enc: &VisionEncoder, img: &Image) -> Array2<f64> {
        let mut t = Tape::new();
        let patches = patchify(img, enc.cfg.patch_size).unwrap();
        let g = enc.encode_global(&mut t, Scope::frozen(store, StoreId::Teacher), &patches, None).unwrap();
        t.value(g).clone()
    }

    fn local(store: &ParamStore, enc: &VisionEncoder, patches: &[&Patch]) -> Array2<f64> {
        let mut t = Tape::new();
        let f = enc.encode_patches(&mut t, Scope::frozen(store, StoreId::Student), patches).unwrap();
        t.value(f).clone()
    }

    #[test]
    fn global_shape_and_determinism() {
        for pe in [PositionEncoding::Absolute, PositionEncoding::Relative] {
            let (store, enc) = vision(EncoderConfig { position_encoding: pe, ..tiny_cfg() });
            let a = global(&store, &enc, &image(1));
            assert_eq!(a.dim(), (1, 8));
            assert_eq!(a, global(&store, &enc, &image(1)));
            assert_ne!(a, global(&store, &enc, &image(2)));
        }
    }

    #[test]
    fn zeroed_global_returns_class_token() {
        let (mut store, enc) = vision(tiny_cfg());
        for id in enc.block_sublayer_params() {
            store.get_mut(id).fill(0.0);
        }
        let g = global(&store, &enc, &image(3));
        assert_eq!(g, *store.get(enc.cls_token));
    }

    #[test]
    fn patch_path_shapes_and_equivariance() {
        for pe in [PositionEncoding::Absolute, PositionEncoding::Relative] {
            let (store, enc) = vision(EncoderConfig { position_encoding: pe, ..tiny_cfg() });
            let patches = patchify(&image(4), 4).unwrap();
            assert_eq!(local(&store, &enc, &[&patches[2]]).dim(), (1, 8));
            let fwd = local(&store, &enc, &[&patches[0], &patches[3], &patches[1]]);
            let swapped = local(&store, &enc, &[&patches[3], &patches[0], &patches[1]]);
            for j in 0..8 {
                assert!((fwd[[0, j]] - swapped[[1, j]]).abs() < 1e-12);
                assert!((fwd[[1, j]] - swapped[[0, j]]).abs() < 1e-12);
                assert!((fwd[[2, j]] - swapped[[2, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_patch_path_returns_position_embeddings() {
        let (mut store, enc) = vision(tiny_cfg());
        for id in enc.block_sublayer_params() {
            store.get_mut(id).fill(0.0);
        }
        store.get_mut(enc.patch_proj.weight).fill(0.0);
        store.get_mut(enc.patch_proj.bias).fill(0.0);
        let patches = patchify(&image(5), 4).unwrap();
        let f = local(&store, &enc, &[&patches[1], &patches[3]]);
        let pos = store.get(enc.pos_embed);
        assert_eq!(f.row(0), pos.row(1));
        assert_eq!(f.row(1), pos.row(3));
    }

    #[test]
    fn empty_patch_set_is_rejected() {
        let (store, enc) = vision(tiny_cfg());
        let mut t = Tape::new();
        let r = enc.encode_patches(&mut t, Scope::frozen(&store, StoreId::Student), &[]);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    fn text(cfg: EncoderConfig) -> (ParamStore, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, cfg, &mut rng);
        (store, enc)
    }

    fn encode_text(store: &ParamStore, enc: &TextEncoder, ids: &[usize]) -> Result<Array2<f64>> {
        let mut t = Tape::new();
        let f = enc.encode(&mut t, Scope::frozen(store, StoreId::Text), ids)?;
        Ok(t.value(f).clone())
    }

    #[test]
    fn text_shapes_and_determinism() {
        for pe in [PositionEncoding::Absolute, PositionEncoding::Relative] {
            let (store, enc) = text(EncoderConfig { position_encoding: pe, ..tiny_cfg() });
            assert_eq!(encode_text(&store, &enc, &[2]).unwrap().dim(), (1, 8));
            let a = encode_text(&store, &enc, &[2, 5, 3]).unwrap();
            assert_eq!(a, encode_text(&store, &enc, &[2, 5, 3]).unwrap());
            // overflow truncates
            assert_eq!(encode_text(&store, &enc, &[2; 9]).unwrap().nrows(), 6);
            assert!(matches!(encode_text(&store, &enc, &[10]), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn zeroed_text_blocks_return_embeddings() {
        let (mut store, enc) = text(tiny_cfg());
        for id in enc.block_sublayer_params() {
            store.get_mut(id).fill(0.0);
        }
        let f = encode_text(&store, &enc, &[4, 7]).unwrap();
        let emb = store.get(enc.token_embed);
        let pos = store.get(enc.pos_embed);
        for (i, id) in [4usize, 7].iter().enumerate() {
            let expected = &emb.row(*id) + &pos.row(i);
            assert_eq!(f.row(i), expected);
        }
    }

    #[test]
    fn pool_text_takes_first_row() {
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let p = pool_text_array(&x).unwrap();
        assert_eq!(p.row(0), x.row(0));
        let single = Array2::from_elem((1, 4), 2.5);
        assert_eq!(pool_text_array(&single).unwrap(), single);
    }
}
