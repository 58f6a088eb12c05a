//! The assembled model: layouts of every component plus the parameter stores
//! they read, and the two forward paths (training and teacher-only inference).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scope, Tape, Var};
use crate::data::{self, Vocab};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoders::{pool_text, EncoderConfig, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::fem::{Enhanced, Fem, FemConfig};
use crate::imaging::Image;
use crate::objectives::DEFAULT_TAU;
use crate::params::{ParamStore, StoreId};
use crate::patching::{patchify, PatchSet, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub fem: FemConfig,
    pub decoder: DecoderConfig,
    pub tau: f64,
    pub symmetric_contrastive: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            sampler: SamplerConfig::default(),
            fem: FemConfig::default(),
            decoder: DecoderConfig::default(),
            tau: DEFAULT_TAU,
            symmetric_contrastive: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.sampler.validate()?;
        self.decoder.validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Parameter handles of every component; values live in [`Stores`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub fem: Fem,
    pub decoder: Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stores {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub text: ParamStore,
    pub fem: ParamStore,
    pub decoder: ParamStore,
}

impl Stores {
    pub fn get(&self, id: StoreId) -> Option<&ParamStore> {
        match id {
            StoreId::Student => Some(&self.student),
            StoreId::Teacher => Some(&self.teacher),
            StoreId::Text => Some(&self.text),
            StoreId::Fem => Some(&self.fem),
            StoreId::Decoder => Some(&self.decoder),
            _ => None,
        }
    }

    pub fn get_mut(&mut self, id: StoreId) -> Option<&mut ParamStore> {
        match id {
            StoreId::Student => Some(&mut self.student),
            StoreId::Teacher => Some(&mut self.teacher),
            StoreId::Text => Some(&mut self.text),
            StoreId::Fem => Some(&mut self.fem),
            StoreId::Decoder => Some(&mut self.decoder),
            _ => None,
        }
    }

    pub const ALL: [StoreId; 5] = [StoreId::Student, StoreId::Teacher, StoreId::Text, StoreId::Fem, StoreId::Decoder];
    /// Stores updated by the optimizer.
    pub const TRAINABLE: [StoreId; 4] = [StoreId::Student, StoreId::Text, StoreId::Fem, StoreId::Decoder];
}

/// Per-store scopes for one forward pass; the teacher is never trainable.
#[derive(Clone, Copy)]
pub struct Scopes<'p> {
    pub student: Scope<'p>,
    pub teacher: Scope<'p>,
    pub text: Scope<'p>,
    pub fem: Scope<'p>,
    pub decoder: Scope<'p>,
}

impl<'p> Scopes<'p> {
    pub fn training(s: &'p Stores) -> Self {
        Self {
            student: Scope::trainable(&s.student, StoreId::Student),
            teacher: Scope::frozen(&s.teacher, StoreId::Teacher),
            text: Scope::trainable(&s.text, StoreId::Text),
            fem: Scope::trainable(&s.fem, StoreId::Fem),
            decoder: Scope::trainable(&s.decoder, StoreId::Decoder),
        }
    }

    pub fn frozen(s: &'p Stores) -> Self {
        Self {
            student: Scope::frozen(&s.student, StoreId::Student),
            teacher: Scope::frozen(&s.teacher, StoreId::Teacher),
            text: Scope::frozen(&s.text, StoreId::Text),
            fem: Scope::frozen(&s.fem, StoreId::Fem),
            decoder: Scope::frozen(&s.decoder, StoreId::Decoder),
        }
    }
}

/// Tokenized inputs of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Image,
    /// Text-encoder ids, unpadded.
    pub prompt: Vec<usize>,
    /// Decoder target `[BOS, …, EOS]`, unpadded.
    pub target: Vec<usize>,
    pub class_id: usize,
}

/// Tape handles produced by the training path for one example.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub f_g: Var,
    pub f_g_star: Var,
    pub f_t_star: Var,
    pub f_p_star: Var,
    pub text_pooled: Var,
    pub logits: Var,
    pub streams: Enhanced,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub stores: Stores,
    pub vocab: Vocab,
}

impl ModelState {
    /// Fresh model; the teacher starts as an exact copy of the student.
    pub fn new(mut cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.encoder.vocab_size = vocab.len();
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(data::derive_seed(&[seed, 0x1417]));
        let (layout, stores) = build(&cfg, &mut rng);
        Ok(Self { cfg, layout, stores, vocab })
    }

    /// Layout for `cfg` with placeholder values, to be overwritten from a checkpoint.
    pub fn skeleton(cfg: ModelConfig, vocab: Vocab) -> Result<Self> {
        Self::new(cfg, vocab, 0)
    }

    pub fn prompt_ids(&self, text: &str) -> Vec<usize> {
        data::strip_padding(&data::tokenize(text, &self.vocab, self.cfg.encoder.max_tokens)).to_vec()
    }

    pub fn target_ids(&self, text: &str) -> Vec<usize> {
        data::strip_padding(&data::tokenize(text, &self.vocab, self.cfg.decoder.max_length + 1)).to_vec()
    }

    pub fn example(&self, sample: &data::SyntheticSample) -> Example {
        Example {
            image: sample.image.clone(),
            prompt: self.prompt_ids(&sample.prompt_text),
            target: self.target_ids(&sample.description_text),
            class_id: sample.class_id,
        }
    }

    /// Teacher global feature f_G on the full grid.
    pub fn teacher_global<'p>(
        &'p self,
        t: &mut Tape<'p>,
        scope: Scope<'p>,
        image: &Image,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let patches = patchify(image, self.cfg.encoder.patch_size)?;
        self.layout.vision.encode_global(t, scope, &patches, trace)
    }

    /// Training-path forward of one (already augmented) example.
    pub fn forward_example<'p>(&'p self, t: &mut Tape<'p>, sc: Scopes<'p>, ex: &Example) -> Result<SampleVars> {
        let f_g = self.teacher_global(t, sc.teacher, &ex.image, None)?;
        let set = PatchSet::from_image(&ex.image, self.cfg.encoder.patch_size, &self.cfg.sampler)?;
        let f_p = self.layout.vision.encode_patches(t, sc.student, &set.retained_patches())?;
        let f_t = self.layout.text.encode(t, sc.text, &ex.prompt)?;
        let e = self.layout.fem.forward(t, sc.fem, f_t, f_g, Some(f_p));
        let f_p_star = e.patch.expect("patch stream was supplied");
        let text_pooled = pool_text(t, e.text);
        let logits = self.layout.decoder.teacher_forced(t, sc.decoder, &ex.target, e.text, e.global)?;
        Ok(SampleVars { f_g, f_g_star: e.global, f_t_star: e.text, f_p_star, text_pooled, logits, streams: e })
    }

    /// Teacher-only inference: (f_G*, f_T*) with text, (f_G*, None) without.
    /// Neither the student nor the sampler is consulted.
    pub fn infer_features(&self, image: &Image, text: Option<&[usize]>) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let mut t = Tape::new();
        let sc = Scopes::frozen(&self.stores);
        let f_g = self.teacher_global(&mut t, sc.teacher, image, None)?;
        match text {
            Some(ids) => {
                let f_t = self.layout.text.encode(&mut t, sc.text, ids)?;
                let e = self.layout.fem.forward(&mut t, sc.fem, f_t, f_g, None);
                Ok((t.value(e.global).clone(), Some(t.value(e.text).clone())))
            }
            None => {
                let g = self.layout.fem.global_only(&mut t, sc.fem, f_g);
                Ok((t.value(g).clone(), None))
            }
        }
    }

    /// Pooled enhanced text embedding of a prompt against an image.
    pub fn prompt_embedding(&self, image: &Image, prompt: &[usize]) -> Result<(Array2<f64>, Array2<f64>)> {
        let (g, t) = self.infer_features(image, Some(prompt))?;
        let t = t.expect("text was supplied");
        Ok((g, t.slice(ndarray::s![0..1, ..]).to_owned()))
    }

    /// Per-head attention weights of the teacher's last block; row 0 is the class-token query.
    pub fn teacher_attention(&self, image: &Image) -> Result<Vec<Array2<f64>>> {
        let mut t = Tape::new();
        let mut trace = Vec::new();
        let sc = Scope::frozen(&self.stores.teacher, StoreId::Teacher);
        self.teacher_global(&mut t, sc, image, Some(&mut trace))?;
        Ok(trace.into_iter().map(|v| t.value(v).clone()).collect())
    }
}

fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Layout, Stores) {
    let attn = cfg.encoder.attention();
    let mut student = ParamStore::new();
    let vision = VisionEncoder::new(&mut student, cfg.encoder, rng);
    let mut text = ParamStore::new();
    let text_enc = TextEncoder::new(&mut text, cfg.encoder, rng);
    let mut fem = ParamStore::new();
    let fem_layout = Fem::new(&mut fem, attn, cfg.fem, rng);
    let mut decoder = ParamStore::new();
    let dec = Decoder::new(&mut decoder, cfg.decoder, attn, cfg.encoder.vocab_size, rng);
    let teacher = student.clone();
    (
        Layout { vision, text: text_enc, fem: fem_layout, decoder: dec },
        Stores { student, teacher, text, fem, decoder },
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_synthetic_dataset, DataConfig, SyntheticSample};

    pub fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.encoder = EncoderConfig {
            model_dim: 8,
            num_layers: 1,
            text_layers: 1,
            num_heads: 2,
            patch_size: 8,
            image_size: 32,
            max_tokens: 16,
            ..EncoderConfig::default()
        };
        cfg.decoder = DecoderConfig { num_layers: 1, max_length: 30, beam_size: 2 };
        cfg
    }

    pub fn tiny_corpus(n_per_class: usize) -> (Vec<SyntheticSample>, Vocab) {
        let (s, _) =
            generate_synthetic_dataset(&DataConfig { n_classes: 4, n_per_class, image_size: 32, seed: 11 }, 8).unwrap();
        let texts: Vec<&str> = s.iter().flat_map(|x| [x.prompt_text.as_str(), x.description_text.as_str()]).collect();
        let vocab = build_vocab(&texts, 1).unwrap();
        (s, vocab)
    }

    #[test]
    fn teacher_starts_as_student_copy() {
        let (_, vocab) = tiny_corpus(1);
        let m = ModelState::new(tiny_config(), vocab, 5).unwrap();
        assert_eq!(m.stores.teacher, m.stores.student);
        assert_eq!(m.cfg.encoder.vocab_size, m.vocab.len());
    }

    #[test]
    fn infer_matches_training_path_and_ignores_lambda() {
        let (s, vocab) = tiny_corpus(2);
        let mut m = ModelState::new(tiny_config(), vocab, 5).unwrap();
        for ex in s.iter().map(|x| m.example(x)) {
            let mut t = Tape::new();
            let v = m.forward_example(&mut t, Scopes::training(&m.stores), &ex).unwrap();
            let (g, txt) = m.infer_features(&ex.image, Some(&ex.prompt)).unwrap();
            assert_eq!(&g, t.value(v.f_g_star));
            assert_eq!(txt.as_ref().unwrap(), t.value(v.f_t_star));
        }
        let before = m.infer_features(&s[0].image, None).unwrap();
        m.cfg.sampler.lambda_threshold = 0.9;
        assert_eq!(m.infer_features(&s[0].image, None).unwrap(), before);
        assert_eq!(before.0.dim(), (1, 8));
    }

    #[test]
    fn teacher_attention_covers_the_grid() {
        let (s, vocab) = tiny_corpus(1);
        let m = ModelState::new(tiny_config(), vocab, 5).unwrap();
        let heads = m.teacher_attention(&s[0].image).unwrap();
        assert_eq!(heads.len(), 2);
        // class token + 16 patch keys
        assert_eq!(heads[0].ncols(), 17);
    }
}
