//! Optimisation loop: three-phase schedule, augmentation, per-batch gradients,
//! AdamW updates of the trainable stores and the EMA teacher.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::derive_seed;
use crate::decoder::PAD;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::{Example, ModelState, Scopes, Stores};
use crate::objectives::{self, LossReport, LossWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamStore, StoreId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        }
    }
}

/// Which loss terms enter the optimised total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveLosses {
    pub cont: bool,
    pub pc: bool,
    pub desc: bool,
}

impl ActiveLosses {
    pub const ALL: Self = Self { cont: true, pc: true, desc: true };

    pub fn mask(self, w: &LossWeights) -> LossWeights {
        LossWeights {
            w_cont: if self.cont { w.w_cont } else { 0.0 },
            w_pc: if self.pc { w.w_pc } else { 0.0 },
            w_desc: if self.desc { w.w_desc } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub warmup_epochs: usize,
    pub main_epochs: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self { warmup_epochs: 2, main_epochs: 20, finetune_epochs: 8, finetune_lr: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    /// Area fraction of the crop before resizing back.
    pub crop_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, max_rotation_deg: 10.0, brightness: (0.8, 1.2), contrast: (0.8, 1.2), crop_scale: (0.85, 1.0) }
    }
}

impl AugmentConfig {
    /// Every transform disabled; `augment` is then the identity.
    pub fn identity() -> Self {
        Self { flip_prob: 0.0, max_rotation_deg: 0.0, brightness: (1.0, 1.0), contrast: (1.0, 1.0), crop_scale: (1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64), min: f64| {
            if !(lo >= min && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("augment.{name} range ({lo}, {hi}) is invalid")));
            }
            Ok(())
        };
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("augment.flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(Error::Config(format!("augment.max_rotation_deg {} outside [0, 180]", self.max_rotation_deg)));
        }
        ordered("brightness", self.brightness, 0.0)?;
        ordered("contrast", self.contrast, 0.0)?;
        ordered("crop_scale", self.crop_scale, f64::MIN_POSITIVE)?;
        if self.crop_scale.1 > 1.0 {
            return Err(Error::Config(format!("augment.crop_scale upper bound {} exceeds 1", self.crop_scale.1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: PhaseSchedule,
    pub base_lr: f64,
    pub ema_alpha: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Micro-batches per optimizer step during fine-tuning.
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Keep the description loss on during fine-tuning.
    pub finetune_desc: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: PhaseSchedule::default(),
            base_lr: 1e-3,
            ema_alpha: 0.999,
            batch_size: 32,
            weight_decay: 0.05,
            grad_accum_steps: 4,
            seed: 0,
            weights: LossWeights::default(),
            finetune_desc: true,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub phase: Phase,
    pub epochs: usize,
    pub base_lr: f64,
    pub active: ActiveLosses,
}

impl TrainConfig {
    /// Named scaled-down settings: `desk-smoke` (1/2/1 epochs, batch 8) and
    /// `desk-full` (2/20/8 epochs, batch 32). The smoke run trades batch size
    /// for optimizer steps so that a few epochs still move the losses.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-smoke" => Ok(Self {
                schedule: PhaseSchedule { warmup_epochs: 1, main_epochs: 2, finetune_epochs: 1, finetune_lr: 1e-4 },
                batch_size: 8,
                ..Self::default()
            }),
            "desk-full" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk-smoke or desk-full)"))),
        }
    }

    pub fn phases(&self) -> [PhaseSpec; 3] {
        let s = &self.schedule;
        [
            PhaseSpec {
                phase: Phase::Warmup,
                epochs: s.warmup_epochs,
                base_lr: self.base_lr,
                active: ActiveLosses { cont: true, pc: false, desc: false },
            },
            PhaseSpec { phase: Phase::Main, epochs: s.main_epochs, base_lr: self.base_lr, active: ActiveLosses::ALL },
            PhaseSpec {
                phase: Phase::Finetune,
                epochs: s.finetune_epochs,
                base_lr: s.finetune_lr,
                active: ActiveLosses { desc: self.finetune_desc, ..ActiveLosses::ALL },
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        for (name, e) in [("warmup", s.warmup_epochs), ("main", s.main_epochs), ("finetune", s.finetune_epochs)] {
            if e == 0 {
                return Err(Error::Config(format!("{name} epochs must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha {} outside [0, 1]", self.ema_alpha)));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be positive".into()));
        }
        for (name, v) in [("base_lr", self.base_lr), ("finetune_lr", s.finetune_lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        self.weights.validate()?;
        self.augment.validate()
    }
}

/// `θ_t ← αθ_t + (1−α)θ_s`, element-wise; the student is read only.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    teacher
        .check_same_layout(student)
        .map_err(|e| Error::Contract(format!("teacher and student layouts differ: {e}")))?;
    for (t, s) in teacher.entries_mut().iter_mut().zip(student.entries()) {
        ndarray::Zip::from(&mut t.value).and(&s.value).for_each(|t, &s| *t = alpha * *t + (1.0 - alpha) * s);
    }
    Ok(())
}

/// Optimizer steps per phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBudget {
    pub warmup: usize,
    pub main: usize,
    pub finetune: usize,
}

impl StepBudget {
    pub fn new(schedule: &PhaseSchedule, batches_per_epoch: usize, accum: usize) -> Self {
        Self {
            warmup: schedule.warmup_epochs * batches_per_epoch,
            main: schedule.main_epochs * batches_per_epoch,
            finetune: schedule.finetune_epochs * batches_per_epoch.div_ceil(accum.max(1)),
        }
    }

    pub fn total(&self) -> usize {
        self.warmup + self.main + self.finetune
    }

    pub fn phase_of(&self, step: usize) -> Phase {
        if step < self.warmup {
            Phase::Warmup
        } else if step < self.warmup + self.main {
            Phase::Main
        } else {
            Phase::Finetune
        }
    }

    /// Linear 0→base over warmup, cosine base→0 over main, then `finetune_lr`.
    pub fn lr_at(&self, step: usize, base_lr: f64, finetune_lr: f64) -> f64 {
        if step < self.warmup {
            base_lr * step as f64 / self.warmup as f64
        } else if step < self.warmup + self.main {
            let progress = (step - self.warmup) as f64 / self.main as f64;
            0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            finetune_lr
        }
    }
}

// ----------------------------------------------------------- augmentation

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Flip → rotate → brightness/contrast → crop-resize, clipped to [0, 1].
/// All random draws happen up front, in a fixed order.
pub fn augment(image: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let angle = draw(rng, (-cfg.max_rotation_deg, cfg.max_rotation_deg)).to_radians();
    let brightness = draw(rng, cfg.brightness);
    let contrast = draw(rng, cfg.contrast);
    let scale = draw(rng, cfg.crop_scale);
    let (oy, ox): (f64, f64) = (rng.random(), rng.random());

    let mut img = if flip { image.flip_horizontal() } else { image.clone() };
    let (h, w) = (img.height as f64, img.width as f64);
    if angle != 0.0 {
        let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
        let (sin, cos) = angle.sin_cos();
        let src = img.clone();
        img = Image::from_fn(src.height, src.width, |y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            src.sample_bilinear(cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
        });
    }
    if brightness != 1.0 {
        img.data.iter_mut().for_each(|v| *v *= brightness);
    }
    if contrast != 1.0 {
        let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
        img.data.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    }
    if scale < 1.0 {
        let side = scale.sqrt();
        let (ch, cw) = (h * side, w * side);
        let (y0, x0) = (oy * (h - ch), ox * (w - cw));
        let src = img.clone();
        img = Image::from_fn(src.height, src.width, |y, x| {
            src.sample_bilinear(y0 + (y as f64 + 0.5) * ch / h - 0.5, x0 + (x as f64 + 0.5) * cw / w - 0.5)
        });
    }
    img.clamp_unit();
    img
}

// -------------------------------------------------------------- gradients

/// Loss terms of one batch on a tape; the optimised total uses `weights`.
struct BatchLoss {
    cont: Var,
    pc: Var,
    desc: Var,
    total: Option<Var>,
}

fn batch_loss<'p>(t: &mut Tape<'p>, model: &'p ModelState, sc: Scopes<'p>, batch: &[Example], weights: &LossWeights) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Precondition("training batch is empty".into()));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut streams = Vec::with_capacity(batch.len());
    let mut pcs = Vec::with_capacity(batch.len());
    let mut descs = Vec::with_capacity(batch.len());
    for ex in batch {
        let v = model.forward_example(t, sc, ex)?;
        streams.push(v.streams);
        pcs.push((objectives::patch_coherence(t, v.f_g_star, v.f_p_star), inv));
        descs.push((objectives::description_nll(t, v.logits, &ex.target, PAD, inv)?, 1.0));
    }
    let pairs = model.layout.fem.cross_pairs(t, sc.fem, &streams);
    let cont = objectives::contrastive_paired(t, pairs.text, pairs.global, pairs.count, model.cfg.tau, model.cfg.symmetric_contrastive)?;
    let pc = t.weighted_sum(&pcs);
    let desc = t.weighted_sum(&descs);
    let terms: Vec<(Var, f64)> =
        [(cont, weights.w_cont), (pc, weights.w_pc), (desc, weights.w_desc)].into_iter().filter(|(_, w)| *w != 0.0).collect();
    let total = (!terms.is_empty()).then(|| t.weighted_sum(&terms));
    Ok(BatchLoss { cont, pc, desc, total })
}

/// Loss report and gradients of the weighted total for one batch.
/// The teacher is bound frozen, so it never appears in the result.
pub fn batch_gradients(model: &ModelState, batch: &[Example], weights: &LossWeights, dropout_seed: u64) -> Result<(LossReport, Gradients)> {
    let mut t = Tape::new();
    if model.cfg.encoder.dropout > 0.0 {
        t.enable_dropout(model.cfg.encoder.dropout, dropout_seed);
    }
    let l = batch_loss(&mut t, model, Scopes::training(&model.stores), batch, weights)?;
    let report = objectives::combine(t.scalar(l.cont), t.scalar(l.pc), t.scalar(l.desc), weights, batch.len())?;
    let grads = match l.total {
        Some(total) => t.backward(total),
        None => Gradients::default(),
    };
    if !grads.all_finite() {
        return Err(Error::Numeric(format!("non-finite gradient (cont={}, pc={}, desc={})", report.cont, report.pc, report.desc)));
    }
    Ok((report, grads))
}

/// Loss report only, without dropout; used for finite-difference checks.
pub fn batch_report(model: &ModelState, batch: &[Example], weights: &LossWeights) -> Result<LossReport> {
    let mut t = Tape::new();
    let l = batch_loss(&mut t, model, Scopes::frozen(&model.stores), batch, weights)?;
    objectives::combine(t.scalar(l.cont), t.scalar(l.pc), t.scalar(l.desc), weights, batch.len())
}

/// Applies `grads` to every trainable store, then the EMA teacher update.
pub fn apply_update(stores: &mut Stores, opt: &mut AdamW, grads: &Gradients, lr: f64, ema_alpha: f64) -> Result<()> {
    if grads.has_store(StoreId::Teacher) {
        return Err(Error::Contract("teacher received a gradient".into()));
    }
    for id in Stores::TRAINABLE {
        opt.step(id, stores.get_mut(id).expect("trainable store"), grads, lr);
    }
    ema_update(&mut stores.teacher, &stores.student, ema_alpha)
}

// ------------------------------------------------------------------ loop

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub report: LossReport,
    pub lr: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ModelState,
    pub opt: AdamW,
    /// Optimizer steps completed.
    pub step: usize,
    pub examples: Vec<Example>,
    pub budget: StepBudget,
    batches_per_epoch: usize,
}

impl Trainer {
    pub fn new(model: ModelState, cfg: TrainConfig, examples: Vec<Example>) -> Result<Self> {
        cfg.validate()?;
        if examples.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
        let budget = StepBudget::new(&cfg.schedule, batches_per_epoch, cfg.grad_accum_steps);
        let opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
        Ok(Self { cfg, model, opt, step: 0, examples, budget, batches_per_epoch })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn done(&self) -> bool {
        self.step >= self.budget.total()
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, 0xE90C, epoch as u64])));
        order
    }

    /// Example indices of each micro-batch making up optimizer step `step`.
    pub fn micro_batches(&self, step: usize) -> Vec<Vec<usize>> {
        let bpe = self.batches_per_epoch;
        let b = self.budget;
        let (epoch, range) = if step < b.warmup + b.main {
            (step / bpe, (step % bpe)..(step % bpe + 1))
        } else {
            let accum = self.cfg.grad_accum_steps;
            let per_epoch = bpe.div_ceil(accum);
            let fs = step - b.warmup - b.main;
            let group = fs % per_epoch;
            (
                self.cfg.schedule.warmup_epochs + self.cfg.schedule.main_epochs + fs / per_epoch,
                (group * accum)..((group + 1) * accum).min(bpe),
            )
        };
        let order = self.epoch_order(epoch);
        range
            .map(|k| order[k * self.cfg.batch_size..((k + 1) * self.cfg.batch_size).min(order.len())].to_vec())
            .collect()
    }

    /// One optimizer step: augmented micro-batches, averaged gradients,
    /// AdamW on the trainable stores, then EMA.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let phase = self.budget.phase_of(step);
        let spec = self.cfg.phases()[phase as usize];
        let weights = spec.active.mask(&self.cfg.weights);
        let lr = self.budget.lr_at(step, self.cfg.base_lr, self.cfg.schedule.finetune_lr);
        let micro = self.micro_batches(step);
        let n_micro = micro.len() as f64;
        let mut grads = Gradients::default();
        let mut sums = [0.0; 4];
        let mut count = 0;
        for (m, idx) in micro.iter().enumerate() {
            let batch: Vec<Example> = idx
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let seed = derive_seed(&[self.cfg.seed, 0xA06, step as u64, m as u64, i as u64]);
                    let ex = &self.examples[e];
                    Example { image: augment(&ex.image, &self.cfg.augment, &mut ChaCha8Rng::seed_from_u64(seed)), ..ex.clone() }
                })
                .collect();
            let drop_seed = derive_seed(&[self.cfg.seed, 0xD50, step as u64, m as u64]);
            let (report, mut g) = batch_gradients(&self.model, &batch, &weights, drop_seed)?;
            g.scale(1.0 / n_micro);
            grads.merge(&g);
            for (s, v) in sums.iter_mut().zip([report.cont, report.pc, report.desc, report.total]) {
                *s += v / n_micro;
            }
            count += batch.len();
        }
        apply_update(&mut self.model.stores, &mut self.opt, &grads, lr, self.cfg.ema_alpha)?;
        self.step += 1;
        let report = LossReport { cont: sums[0], pc: sums[1], desc: sums[2], total: sums[3], batch_size: count };
        Ok(StepRecord { step, phase, report, lr })
    }
}

// -------------------------------------------------------------------- log

pub const LOG_HEADER: [&str; 7] = ["step", "phase", "cont", "pc", "desc", "total", "lr"];

/// Appends step records to `path`, writing the header only for a new file.
pub struct LossLog {
    writer: csv::Writer<std::fs::File>,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            writer.write_record(LOG_HEADER).map_err(csv_err)?;
        }
        Ok(Self { writer })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let p = &r.report;
        let row = [
            r.step.to_string(),
            r.phase.name().to_string(),
            p.cont.to_string(),
            p.pc.to_string(),
            p.desc.to_string(),
            p.total.to_string(),
            r.lr.to_string(),
        ];
        self.writer.write_record(&row).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Rows of a loss log as (step, phase, cont, pc, desc, total, lr).
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != LOG_HEADER {
        return Err(Error::Data(format!("{}: unexpected header {:?}", path.display(), headers)));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse().map_err(|_| Error::Data(format!("bad number {:?} in loss log", &row[i])))
        };
        let phase = match &row[1] {
            "warmup" => Phase::Warmup,
            "main" => Phase::Main,
            "finetune" => Phase::Finetune,
            other => return Err(Error::Data(format!("unknown phase {other:?} in loss log"))),
        };
        out.push(StepRecord {
            step: num(0)? as usize,
            phase,
            report: LossReport { cont: num(2)?, pc: num(3)?, desc: num(4)?, total: num(5)?, batch_size: 0 },
            lr: num(6)?,
        });
    }
    Ok(out)
}

/// Writes a short human-readable summary line to `out`.
pub fn summarize(out: &mut impl Write, r: &StepRecord) -> std::io::Result<()> {
    writeln!(
        out,
        "step {:>5} {:<8} lr {:.2e} cont {:.4} pc {:.4} desc {:.3} total {:.3}",
        r.step,
        r.phase.name(),
        r.lr,
        r.report.cont,
        r.report.pc,
        r.report.desc,
        r.report.total
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_corpus};

    fn tiny_trainer(cfg: TrainConfig) -> Trainer {
        let (s, vocab) = tiny_corpus(3);
        let model = ModelState::new(tiny_config(), vocab, 1).unwrap();
        let examples = s.iter().map(|x| model.example(x)).collect();
        Trainer::new(model, cfg, examples).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            schedule: PhaseSchedule { warmup_epochs: 1, main_epochs: 1, finetune_epochs: 1, finetune_lr: 1e-4 },
            batch_size: 4,
            grad_accum_steps: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ema_examples() {
        let mut s = ParamStore::new();
        s.add("w", ndarray::array![[0.0, 2.0]], true);
        let mut t = ParamStore::new();
        t.add("w", ndarray::array![[1.0, -1.0]], true);
        let orig = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, orig);
        ema_update(&mut t, &s, 0.999).unwrap();
        assert_eq!(t.entries()[0].value[[0, 0]], 0.999);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
        let mut other = ParamStore::new();
        other.add("w", ndarray::array![[1.0]], true);
        assert!(matches!(ema_update(&mut other, &s, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn lr_schedule_examples() {
        let b = StepBudget { warmup: 10, main: 20, finetune: 5 };
        assert_eq!(b.lr_at(0, 1e-3, 1e-4), 0.0);
        assert_eq!(b.lr_at(10, 1e-3, 1e-4), 1e-3);
        let mid = b.lr_at(20, 1e-3, 1e-4);
        let oracle = 0.5 * 1e-3 * (1.0 + (std::f64::consts::PI * 0.5).cos());
        assert!((mid - 5e-4).abs() < 1e-9 && (mid - oracle).abs() < 1e-18);
        assert_eq!(b.lr_at(30, 1e-3, 1e-4), 1e-4);
        assert_eq!(b.phase_of(9), Phase::Warmup);
        assert_eq!(b.phase_of(29), Phase::Main);
        assert_eq!(b.phase_of(30), Phase::Finetune);
    }

    #[test]
    fn augment_examples() {
        let img = Image::from_fn(16, 16, |y, x| [y as f64 / 16.0, x as f64 / 16.0, 0.3]);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (16, 16));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(augment(&img, &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(1)), img);

        let flat = Image::filled(8, 8, [0.5; 3]);
        let bright = AugmentConfig { brightness: (1.2, 1.2), ..AugmentConfig::identity() };
        let out = augment(&flat, &bright, &mut ChaCha8Rng::seed_from_u64(2));
        assert!(out.data.iter().all(|v| (v - 0.5 * 1.2).abs() < 1e-12));
    }

    #[test]
    fn teacher_after_step_follows_ema_formula() {
        let mut tr = tiny_trainer(small_cfg());
        tr.step = 1; // nonzero lr
        let t0 = tr.model.stores.teacher.clone();
        tr.train_step().unwrap();
        let mut expected = t0;
        ema_update(&mut expected, &tr.model.stores.student, 0.999).unwrap();
        assert_eq!(tr.model.stores.teacher, expected);
    }

    #[test]
    fn zero_lr_changes_only_teacher() {
        let cfg = TrainConfig { base_lr: 0.0, ema_alpha: 0.5, ..small_cfg() };
        let mut tr = tiny_trainer(cfg);
        perturb_student(&mut tr);
        let before = tr.model.stores.clone();
        tr.step = 2; // main phase, all stores receive gradients
        tr.train_step().unwrap();
        let after = &tr.model.stores;
        assert_eq!(after.student, before.student);
        assert_eq!(after.text, before.text);
        assert_eq!(after.fem, before.fem);
        assert_eq!(after.decoder, before.decoder);
        assert_ne!(after.teacher, before.teacher);
    }

    fn perturb_student(tr: &mut Trainer) {
        for e in tr.model.stores.student.entries_mut() {
            e.value.mapv_inplace(|v| v + 0.01);
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let run = || {
            let mut tr = tiny_trainer(small_cfg());
            (0..5).map(|_| tr.train_step().unwrap().report).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn teacher_never_gets_gradients() {
        let tr = tiny_trainer(small_cfg());
        let (_, g) = batch_gradients(&tr.model, &tr.examples[..3], &LossWeights::default(), 0).unwrap();
        assert!(!g.has_store(StoreId::Teacher));
        for id in Stores::TRAINABLE {
            assert!(g.has_store(id), "{id:?}");
        }
    }

    #[test]
    fn warmup_trains_only_contrastive_path() {
        let tr = tiny_trainer(small_cfg());
        let w = tr.cfg.phases()[0].active.mask(&tr.cfg.weights);
        let (r, g) = batch_gradients(&tr.model, &tr.examples[..3], &w, 0).unwrap();
        assert_eq!(r.total, r.cont);
        assert!(!g.has_store(StoreId::Student));
        assert!(!g.has_store(StoreId::Decoder));
    }

    #[test]
    fn step_plan_covers_phases() {
        let tr = tiny_trainer(small_cfg());
        // 12 examples, batch 4: 3 batches per epoch; finetune groups of 2 → 2 steps.
        assert_eq!(tr.budget, StepBudget { warmup: 3, main: 3, finetune: 2 });
        let mut seen: Vec<usize> = (0..3).flat_map(|s| tr.micro_batches(s).concat()).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert_eq!(tr.micro_batches(6).len(), 2);
        assert_eq!(tr.micro_batches(7).len(), 1);
    }

    #[test]
    fn loss_log_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rec = |step| StepRecord {
            step,
            phase: Phase::Main,
            report: LossReport { cont: 1.5, pc: 0.25, desc: 3.0, total: 4.75, batch_size: 2 },
            lr: 1e-3,
        };
        LossLog::open(&path).unwrap().append(&rec(0)).unwrap();
        LossLog::open(&path).unwrap().append(&rec(1)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,phase,cont,pc,desc,total,lr\n"));
        let rows = read_loss_log(&path).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(rows[1].report.total, 4.75);
    }

    #[test]
    fn losses_stay_finite_over_random_steps() {
        let mut tr = tiny_trainer(TrainConfig { base_lr: 5e-3, ..small_cfg() });
        tr.step = 3;
        for _ in 0..200 {
            if tr.done() {
                tr.step = 3;
            }
            let r = tr.train_step().unwrap().report;
            assert!(r.total.is_finite());
        }
    }
}
