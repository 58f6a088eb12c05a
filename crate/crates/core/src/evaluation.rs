//! Metrics and protocols: linear probe, top-k and macro scores, zero-shot
//! ranking, toy VQA with answer-constrained decoding, attention maps.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::autodiff::{Scope, Tape};
use crate::data::{self, SyntheticSample};
use crate::decoder::{argmax, DecodeMode, GenerationResult, BOS, EOS};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::ModelState;
use crate::nn::cosine_similarity;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamStore, StoreId};

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_top1: f64,
    pub acc_top5: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Rank of `label` in `row` (0 = best); equal scores rank the lower index first.
fn rank_of(row: ndarray::ArrayView1<f64>, label: usize) -> usize {
    let s = row[label];
    row.iter().enumerate().filter(|&(c, &v)| v > s || (v == s && c < label)).count()
}

/// Fraction of rows whose label is among the `k` best-scored columns.
pub fn topk_accuracy(scores: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    if scores.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} score rows for {} labels", scores.nrows(), labels.len())));
    }
    if k == 0 || k > scores.ncols() {
        return Err(Error::Precondition(format!("k = {k} must be in 1..={}", scores.ncols())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= scores.ncols()) {
        return Err(Error::Shape(format!("label {bad} outside {} classes", scores.ncols())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = labels.iter().enumerate().filter(|&(i, &l)| rank_of(scores.row(i), l) < k).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Macro precision/recall over the classes `0..num_classes`; a class with no
/// predictions has precision 0. `f1` is the harmonic mean of the two macros.
pub fn macro_scores(predicted: &[usize], labels: &[usize], num_classes: usize) -> (f64, f64, f64, Vec<ClassMetrics>) {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = predicted.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let pred = predicted.iter().filter(|&&p| p == c).count() as f64;
        let support = labels.iter().filter(|&&l| l == c).count();
        let precision = if pred > 0.0 { tp / pred } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        per_class.push(ClassMetrics { class_id: c, precision, recall, f1: harmonic(precision, recall), support });
    }
    let n = num_classes.max(1) as f64;
    let p = per_class.iter().map(|m| m.precision).sum::<f64>() / n;
    let r = per_class.iter().map(|m| m.recall).sum::<f64>() / n;
    (p, r, harmonic(p, r), per_class)
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores.outer_iter().map(|r| argmax(r.as_slice().expect("standard layout"))).collect()
}

/// Full report for a score matrix; `class_ids` names the columns.
pub fn metric_report(scores: &Array2<f64>, labels: &[usize], class_ids: &[usize]) -> Result<MetricReport> {
    let c = scores.ncols();
    let (precision, recall, f1, mut per_class) = macro_scores(&argmax_rows(scores), labels, c);
    for (m, &id) in per_class.iter_mut().zip(class_ids) {
        m.class_id = id;
    }
    Ok(MetricReport {
        acc_top1: topk_accuracy(scores, labels, 1)?,
        acc_top5: topk_accuracy(scores, labels, 5.min(c))?,
        precision,
        recall,
        f1,
        per_class,
    })
}

// ---------------------------------------------------------------- features

/// Teacher f_G* without text, one row per image.
pub fn global_features(model: &ModelState, images: &[&Image]) -> Result<Array2<f64>> {
    let d = model.cfg.encoder.model_dim;
    let mut out = Array2::zeros((images.len(), d));
    for (i, img) in images.iter().enumerate() {
        let (g, _) = model.infer_features(img, None)?;
        out.row_mut(i).assign(&g.row(0));
    }
    Ok(out)
}

/// Teacher-only features; see [`ModelState::infer_features`].
pub fn infer_features(model: &ModelState, image: &Image, text: Option<&[usize]>) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    model.infer_features(image, text)
}

// ------------------------------------------------------------------ probe

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.01, weight_decay: 1e-4, seed: 0 }
    }
}

/// Affine softmax classifier on standardised features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// Original class ids, in column order.
    pub classes: Vec<usize>,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub store: ParamStore,
}

impl LinearProbe {
    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.std
    }

    pub fn scores(&self, x: &Array2<f64>) -> Array2<f64> {
        let z = self.standardize(x);
        let w = &self.store.entries()[0].value;
        let b = &self.store.entries()[1].value;
        z.dot(w) + b
    }

    /// Maps original class ids to column indices; unknown ids are an error.
    pub fn columns(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.classes
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::Data(format!("class {l} is absent from the probe's training split")))
            })
            .collect()
    }

    pub fn evaluate(&self, x: &Array2<f64>, labels: &[usize]) -> Result<MetricReport> {
        metric_report(&self.scores(x), &self.columns(labels)?, &self.classes)
    }
}

/// Trains only an affine layer on frozen features with full-batch AdamW.
pub fn train_linear_probe(x: &Array2<f64>, labels: &[usize], cfg: &ProbeConfig) -> Result<LinearProbe> {
    if x.nrows() != labels.len() || x.nrows() == 0 {
        return Err(Error::Shape(format!("{} feature rows for {} labels", x.nrows(), labels.len())));
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let w = store.normal("probe.weight", x.ncols(), classes.len(), &mut rng);
    let b = store.constant("probe.bias", 1, classes.len(), 0.0);
    let mut probe = LinearProbe { classes, mean, std, store: ParamStore::new() };
    let z = probe.standardize(x);
    let targets: Vec<Option<usize>> = probe.columns(labels)?.into_iter().map(Some).collect();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let inv = 1.0 / x.nrows() as f64;
    for _ in 0..cfg.epochs {
        let grads = {
            let mut t = Tape::new();
            let s = Scope::trainable(&store, StoreId::Probe);
            let zv = t.constant_ref(&z);
            let (wv, bv) = (t.bind(s, w), t.bind(s, b));
            let h = t.matmul(zv, wv);
            let logits = t.add_row(h, bv);
            let loss = t.cross_entropy(logits, &targets, inv);
            if !t.scalar(loss).is_finite() {
                return Err(Error::Numeric("linear probe loss is not finite".into()));
            }
            t.backward(loss)
        };
        opt.step(StoreId::Probe, &mut store, &grads, cfg.lr);
    }
    probe.store = store;
    Ok(probe)
}

// -------------------------------------------------------------- zero-shot

/// Classes ranked by `cos(pool_text(f_T*_c), f_G*_c)`, best first; ties keep
/// the lower prompt index first.
pub fn zero_shot_classify(model: &ModelState, image: &Image, prompts: &[Vec<usize>]) -> Result<Vec<(usize, f64)>> {
    let mut scored = Vec::with_capacity(prompts.len());
    for (c, p) in prompts.iter().enumerate() {
        let (g, t) = model.prompt_embedding(image, p)?;
        let s = cosine_similarity(t.row(0).as_slice().expect("row"), g.row(0).as_slice().expect("row"))?;
        scored.push((c, s));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub classes: Vec<usize>,
    pub prompts: Vec<String>,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub chance: f64,
    /// One-sided binomial `P(X ≥ correct)` under chance accuracy.
    pub p_value: f64,
    pub metrics: MetricReport,
}

pub fn binomial_upper_tail(n: usize, k: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let b = Binomial::new(p, n as u64).expect("valid binomial");
    b.sf(k as u64 - 1)
}

/// Zero-shot accuracy over `samples`, choosing among `classes`.
pub fn zero_shot_eval(model: &ModelState, samples: &[&SyntheticSample], classes: &[usize]) -> Result<ZeroShotReport> {
    if classes.len() < 2 {
        return Err(Error::Precondition("zero-shot evaluation needs at least two candidate classes".into()));
    }
    let prompts: Vec<String> = classes.iter().map(|&c| data::class_prompt(data::TAXONOMY[c].0)).collect();
    let ids: Vec<Vec<usize>> = prompts.iter().map(|p| model.prompt_ids(p)).collect();
    let mut scores = Array2::zeros((samples.len(), classes.len()));
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        for (c, sc) in zero_shot_classify(model, &s.image, &ids)? {
            scores[[i, c]] = sc;
        }
        labels.push(
            classes
                .iter()
                .position(|&c| c == s.class_id)
                .ok_or_else(|| Error::Data(format!("image {} is not of a candidate class", s.record.image_id)))?,
        );
    }
    let metrics = metric_report(&scores, &labels, classes)?;
    let correct = (metrics.acc_top1 * samples.len() as f64).round() as usize;
    let chance = 1.0 / classes.len() as f64;
    Ok(ZeroShotReport {
        classes: classes.to_vec(),
        prompts,
        n: samples.len(),
        correct,
        accuracy: metrics.acc_top1,
        chance,
        p_value: binomial_upper_tail(samples.len(), correct, chance),
        metrics,
    })
}

// -------------------------------------------------------------------- VQA

/// Token trie over the closed answer set.
#[derive(Debug, Default, Clone)]
struct Trie {
    children: BTreeMap<usize, Trie>,
    answer: Option<usize>,
}

impl Trie {
    fn insert(&mut self, tokens: &[usize], answer: usize) {
        match tokens.split_first() {
            None => {
                self.answer.get_or_insert(answer);
            }
            Some((t, rest)) => self.children.entry(*t).or_default().insert(rest, answer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaAnswer {
    pub answer: String,
    pub answer_index: usize,
    pub log_prob: f64,
}

/// Greedy decoding restricted to prefixes of `answers`; the question is the
/// text stream. Ending is allowed (via EOS) wherever a full answer is spelled.
pub fn toy_vqa(model: &ModelState, image: &Image, question: &str, answers: &[String]) -> Result<VqaAnswer> {
    if answers.is_empty() {
        return Err(Error::Precondition("answer vocabulary is empty".into()));
    }
    let mut trie = Trie::default();
    for (i, a) in answers.iter().enumerate() {
        trie.insert(&model.vocab.encode(a), i);
    }
    let q = model.prompt_ids(question);
    let (g, t) = model.infer_features(image, Some(&q))?;
    let t = t.expect("text supplied");
    let mut seq = vec![BOS];
    let mut node = &trie;
    let mut log_prob = 0.0;
    loop {
        let mut allowed: Vec<usize> = node.children.keys().copied().collect();
        if node.answer.is_some() {
            if allowed.is_empty() {
                break;
            }
            allowed.push(EOS);
        }
        let lp = model.layout.decoder.next_log_probs(&model.stores.decoder, &seq, &t, &g)?;
        let next = allowed
            .iter()
            .copied()
            .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
            .expect("non-empty");
        log_prob += lp[next];
        if next == EOS {
            break;
        }
        seq.push(next);
        node = &node.children[&next];
        if seq.len() > model.cfg.decoder.max_length {
            break;
        }
    }
    let idx = node.answer.unwrap_or_else(|| first_answer(node));
    Ok(VqaAnswer { answer: answers[idx].clone(), answer_index: idx, log_prob })
}

fn first_answer(node: &Trie) -> usize {
    node.answer.unwrap_or_else(|| first_answer(node.children.values().next().expect("trie leaf has an answer")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub image_id: String,
    pub question: String,
    pub predicted: String,
    pub answer: String,
    pub correct: bool,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// The two toy question templates with their closed answer sets.
pub fn vqa_questions(num_classes: usize) -> Vec<(&'static str, Vec<String>, fn(&SyntheticSample) -> String)> {
    let subs: Vec<String> = data::TAXONOMY[..num_classes].iter().map(|(s, _)| s.to_lowercase()).collect();
    let cats: Vec<String> = data::CATEGORIES.iter().map(|c| c.to_lowercase()).collect();
    vec![
        ("what product is this ?", subs, |s| s.record.sub_category.to_lowercase()),
        ("what category is this product ?", cats, |s| s.record.category.to_lowercase()),
    ]
}

pub fn vqa_eval(model: &ModelState, samples: &[&SyntheticSample], num_classes: usize) -> Result<(VqaReport, Vec<VqaRecord>)> {
    let mut records = Vec::new();
    let mut pred_idx = Vec::new();
    let mut true_idx = Vec::new();
    let mut offset = 0;
    for (question, answers, truth) in vqa_questions(num_classes) {
        for s in samples {
            let a = toy_vqa(model, &s.image, question, &answers)?;
            let expected = truth(s);
            let t = answers.iter().position(|x| *x == expected).expect("answer set covers the truth");
            pred_idx.push(offset + a.answer_index);
            true_idx.push(offset + t);
            records.push(VqaRecord {
                image_id: s.record.image_id.clone(),
                question: question.to_string(),
                correct: a.answer == expected,
                predicted: a.answer,
                answer: expected,
                log_prob: a.log_prob,
            });
        }
        offset += answers.len();
    }
    let n = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let (_, _, f1, _) = macro_scores(&pred_idx, &true_idx, offset);
    Ok((VqaReport { n, accuracy: correct as f64 / n.max(1) as f64, macro_f1: f1 }, records))
}

// ------------------------------------------------------------ vocab/describe

/// Text stream used when generating a free description.
pub const DESCRIBE_PROMPT: &str = "a photo of a product";

/// Vocabulary from training prompts and descriptions, extended with every word
/// the evaluation protocols need (class prompts, VQA questions and answers).
pub fn build_run_vocab(train: &[&SyntheticSample], num_classes: usize, min_freq: usize) -> Result<data::Vocab> {
    let corpus: Vec<&str> = train.iter().flat_map(|s| [s.prompt_text.as_str(), s.description_text.as_str()]).collect();
    let base = data::build_vocab(&corpus, min_freq)?;
    let mut extra: Vec<String> = data::TAXONOMY[..num_classes.min(data::TAXONOMY.len())]
        .iter()
        .map(|(sub, _)| data::class_prompt(sub))
        .collect();
    for (q, answers, _) in vqa_questions(num_classes.min(data::TAXONOMY.len())) {
        extra.push(q.to_string());
        extra.extend(answers);
    }
    extra.push(DESCRIBE_PROMPT.to_string());
    let mut tokens = base.tokens;
    let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
    for w in extra.iter().flat_map(|t| t.split_whitespace()).map(str::to_lowercase) {
        if seen.insert(w.clone()) {
            tokens.push(w);
        }
    }
    Ok(data::Vocab::from_tokens(tokens))
}

/// Beam-search description of an image.
pub fn describe(model: &ModelState, image: &Image) -> Result<GenerationResult> {
    let prompt = model.prompt_ids(DESCRIBE_PROMPT);
    let (g, t) = model.infer_features(image, Some(&prompt))?;
    model.layout.decoder.generate(&model.stores.decoder, &t.expect("text supplied"), &g, DecodeMode::Beam)
}

// -------------------------------------------------------------- attention

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub image_id: String,
    /// Row-major over the patch grid, values in [0, 1].
    pub scores: Vec<f64>,
    pub grid: usize,
    pub overlay: Image,
}

/// Min-max normalisation; a constant input maps to all 0.5.
pub fn normalize_map(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn heat(v: f64) -> [f64; 3] {
    [v, 0.25 * (1.0 - (2.0 * v - 1.0).abs()), 1.0 - v]
}

/// Class-token attention of the teacher's last block, averaged over heads.
pub fn export_attention_map(model: &ModelState, image: &Image, image_id: &str) -> Result<AttentionMap> {
    let heads = model.teacher_attention(image)?;
    let n = model.cfg.encoder.num_patches();
    let mut raw = vec![0.0; n];
    for h in &heads {
        for (i, r) in raw.iter_mut().enumerate() {
            *r += h[[0, i + 1]] / heads.len() as f64;
        }
    }
    let scores = normalize_map(&raw);
    let grid = model.cfg.encoder.grid();
    let ps = model.cfg.encoder.patch_size;
    let overlay = Image::from_fn(image.height, image.width, |y, x| {
        let v = scores[(y / ps) * grid + x / ps];
        let (p, c) = (image.get(y, x), heat(v));
        [0.5 * p[0] + 0.5 * c[0], 0.5 * p[1] + 0.5 * c[1], 0.5 * p[2] + 0.5 * c[2]]
    });
    Ok(AttentionMap { image_id: image_id.to_string(), scores, grid, overlay })
}

/// Flat indices of grid patches overlapping a pixel box `(row0, row1, col0, col1)`.
pub fn patches_in_box(b: (usize, usize, usize, usize), patch_size: usize, grid: usize) -> Vec<usize> {
    let (r0, r1, c0, c1) = b;
    let mut out = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let (y0, x0) = (gy * patch_size, gx * patch_size);
            if y0 < r1 && y0 + patch_size > r0 && x0 < c1 && x0 + patch_size > c0 {
                out.push(gy * grid + gx);
            }
        }
    }
    out
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Share of samples whose mean band-patch attention exceeds the map median.
pub fn band_attention_rate(model: &ModelState, samples: &[&SyntheticSample]) -> Result<f64> {
    let (ps, grid) = (model.cfg.encoder.patch_size, model.cfg.encoder.grid());
    let mut above = 0;
    let mut n = 0;
    for s in samples {
        let Some(b) = s.band else { continue };
        let map = export_attention_map(model, &s.image, &s.record.image_id)?;
        let idx = patches_in_box(b, ps, grid);
        let band = idx.iter().map(|&i| map.scores[i]).sum::<f64>() / idx.len().max(1) as f64;
        if band > median(&map.scores) {
            above += 1;
        }
        n += 1;
    }
    Ok(above as f64 / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_corpus};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn run_vocab_covers_evaluation_text() {
        let (s, _) = crate::model::tests::tiny_corpus(2);
        let refs: Vec<&SyntheticSample> = s.iter().collect();
        let v = build_run_vocab(&refs[..2], 4, 1).unwrap();
        for text in [data::class_prompt("Cigars"), DESCRIBE_PROMPT.into(), "what category is this product ?".into()] {
            assert!(text.split_whitespace().all(|w| v.contains(&w.to_lowercase())), "{text}");
        }
        assert_eq!(v.tokens.len(), v.tokens.iter().collect::<BTreeSet<_>>().len());
    }

    #[test]
    fn topk_examples() {
        let perfect = array![[0.9, 0.1, 0.0], [0.0, 1.0, 0.2]];
        for k in 1..=3 {
            assert_eq!(topk_accuracy(&perfect, &[0, 1], k).unwrap(), 1.0);
        }
        let s = array![[0.1, 0.5, 0.4], [0.3, 0.3, 0.3], [0.2, 0.1, 0.7]];
        // ranks via sort oracle: row0 label2 → rank 1; row1 label2 → tie, rank 2; row2 label1 → rank 2
        let labels = [2, 2, 1];
        let oracle = |k: usize| -> f64 {
            let mut hits = 0;
            for (i, &l) in labels.iter().enumerate() {
                let mut order: Vec<usize> = (0..3).collect();
                order.sort_by(|&a, &b| f64::total_cmp(&s[[i, b]], &s[[i, a]]).then(a.cmp(&b)));
                if order[..k].contains(&l) {
                    hits += 1;
                }
            }
            hits as f64 / 3.0
        };
        for k in 1..=3 {
            assert_eq!(topk_accuracy(&s, &labels, k).unwrap(), oracle(k));
        }
        assert_eq!(topk_accuracy(&s, &labels, 1).unwrap(), 0.0);
        assert!((topk_accuracy(&s, &labels, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(topk_accuracy(&s, &labels, 4).is_err());
    }

    proptest! {
        #[test]
        fn topk_is_monotone(seed in 0u64..1000, c in 2usize..7, b in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Array2::from_shape_fn((b, c), |_| (rng.random_range(0..4) as f64) / 4.0);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
            let mut prev = 0.0;
            for k in 1..=c {
                let a = topk_accuracy(&s, &labels, k).unwrap();
                prop_assert!(a >= prev && (0.0..=1.0).contains(&a));
                prev = a;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }

    #[test]
    fn macro_f1_on_confusion_fixture() {
        // 3 classes; confusion rows = truth, cols = prediction:
        // [[2,1,0],[0,1,1],[1,0,2]]
        let labels = [0, 0, 0, 1, 1, 2, 2, 2];
        let preds = [0, 0, 1, 1, 2, 0, 2, 2];
        let (p, r, f1, per) = macro_scores(&preds, &labels, 3);
        let precision = [2.0 / 3.0, 1.0 / 2.0, 2.0 / 3.0];
        let recall = [2.0 / 3.0, 1.0 / 2.0, 2.0 / 3.0];
        let mp = precision.iter().sum::<f64>() / 3.0;
        let mr = recall.iter().sum::<f64>() / 3.0;
        assert!((p - mp).abs() < 1e-15 && (r - mr).abs() < 1e-15);
        assert!((f1 - 2.0 * mp * mr / (mp + mr)).abs() < 1e-15);
        assert_eq!(per[1].support, 2);
    }

    #[test]
    fn half_correct_batch() {
        let (p, r, f1, _) = macro_scores(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
        // class 0: P=1, R=1/2; class 1: P=2/3, R=1
        let (mp, mr) = ((1.0 + 2.0 / 3.0) / 2.0, 0.75);
        assert!((p - mp).abs() < 1e-15 && (r - mr).abs() < 1e-15);
        assert!((f1 - 2.0 * mp * mr / (mp + mr)).abs() < 1e-15);
        let acc = topk_accuracy(&array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]], &[0, 0, 1, 1], 1).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn probe_on_one_hot_features_is_perfect() {
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
        let probe = train_linear_probe(&x, &labels, &ProbeConfig::default()).unwrap();
        let r = probe.evaluate(&x, &labels).unwrap();
        assert_eq!(r.acc_top1, 1.0);
        assert!(probe.evaluate(&x, &[9; 40]).is_err());
    }

    #[test]
    fn probe_on_random_labels_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = |rng: &mut ChaCha8Rng, n: usize| {
            let x = Array2::from_shape_fn((n, 8), |_| rng.random_range(-1.0..1.0));
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            (x, y)
        };
        let (x, y) = gen(&mut rng, 400);
        let (xt, yt) = gen(&mut rng, 2000);
        let probe = train_linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
        let acc = probe.evaluate(&xt, &yt).unwrap().acc_top1;
        // 2000 draws at p = 1/4: sd ≈ 0.0097
        assert!((acc - 0.25).abs() < 0.05, "{acc}");
    }

    #[test]
    fn zero_shot_tie_and_self_match() {
        let (s, vocab) = tiny_corpus(1);
        let m = ModelState::new(tiny_config(), vocab, 3).unwrap();
        let p = m.prompt_ids("a photo of a cigars product");
        let ranked = zero_shot_classify(&m, &s[0].image, &[p.clone(), p]).unwrap();
        assert_eq!(ranked[0].0, 0);
        assert_eq!(ranked[1].0, 1);
        assert_eq!(ranked[0].1, ranked[1].1);
    }

    #[test]
    fn binomial_tail_matches_direct_sum() {
        let (n, k, p) = (20usize, 14usize, 0.5f64);
        let choose = |n: usize, k: usize| (0..k).fold(1.0, |a, i| a * (n - i) as f64 / (i + 1) as f64);
        let direct: f64 = (k..=n).map(|j| choose(n, j) * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32)).sum();
        assert!((binomial_upper_tail(n, k, p) - direct).abs() < 1e-12);
        assert_eq!(binomial_upper_tail(10, 0, 0.3), 1.0);
    }

    #[test]
    fn vqa_single_answer_is_always_chosen() {
        let (s, vocab) = tiny_corpus(1);
        let m = ModelState::new(tiny_config(), vocab, 3).unwrap();
        let a = toy_vqa(&m, &s[0].image, "what product is this ?", &["cigarettes".into()]).unwrap();
        assert_eq!(a.answer, "cigarettes");
        let (report, recs) = vqa_eval(&m, &[&s[0], &s[1]], 4).unwrap();
        assert_eq!(report.n, 4);
        assert_eq!(recs.len(), 4);
    }

    #[test]
    fn attention_map_contract() {
        let (s, vocab) = tiny_corpus(1);
        let mut m = ModelState::new(tiny_config(), vocab, 3).unwrap();
        let map = export_attention_map(&m, &s[0].image, "x").unwrap();
        assert_eq!(map.scores.len(), 16);
        assert!(map.scores.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.scores.contains(&0.0) && map.scores.contains(&1.0));
        assert_eq!((map.overlay.height, map.overlay.width), (32, 32));

        // Without position information every patch of a flat image looks alike.
        let pe = m.layout.vision.pos_embed;
        m.stores.teacher.get_mut(pe).fill(0.0);
        let flat = Image::filled(32, 32, [0.4; 3]);
        let map = export_attention_map(&m, &flat, "flat").unwrap();
        assert!(map.scores.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn band_box_to_patches() {
        assert_eq!(patches_in_box((8, 16, 0, 9), 8, 4), vec![4, 5]);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }
}
