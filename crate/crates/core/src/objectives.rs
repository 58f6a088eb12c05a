//! Contrastive, patch-coherence and description losses, and their weighted sum.
//!
//! Each loss has a tape form used by the trainer and a plain-array form that
//! returns the value (and, for tests, the gradient with respect to its inputs).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cont: f64,
    pub w_pc: f64,
    pub w_desc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_cont: 1.0, w_pc: 1.0, w_desc: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_cont, self.w_pc, self.w_desc];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cont: f64,
    pub pc: f64,
    pub desc: f64,
    pub total: f64,
    pub batch_size: usize,
}

/// Weighted total of the three terms; any non-finite term is an error naming it.
pub fn combine(cont: f64, pc: f64, desc: f64, weights: &LossWeights, batch_size: usize) -> Result<LossReport> {
    for (name, v) in [("cont", cont), ("pc", pc), ("desc", desc)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss term {name} is {v} (cont={cont}, pc={pc}, desc={desc})")));
        }
    }
    let total = weights.w_cont * cont + weights.w_pc * pc + weights.w_desc * desc;
    Ok(LossReport { cont, pc, desc, total, batch_size })
}

fn check_rows(name: &str, x: &Array2<f64>) -> Result<()> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric(format!("{name} contains non-finite values")));
    }
    for (i, r) in x.outer_iter().enumerate() {
        if r.dot(&r) == 0.0 {
            return Err(Error::Numeric(format!("{name} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Text→image InfoNCE over in-batch negatives (B×D inputs, row i matched).
/// With `symmetric`, the image→text direction is averaged in.
pub fn contrastive<'p>(t: &mut Tape<'p>, text: Var, global: Var, tau: f64, symmetric: bool) -> Result<Var> {
    check_rows("text vectors", t.value(text))?;
    check_rows("global vectors", t.value(global))?;
    let b = t.shape(text).0;
    if t.shape(global).0 != b {
        return Err(Error::Shape(format!("{b} text rows vs {} global rows", t.shape(global).0)));
    }
    let tn = t.l2_normalize_rows(text);
    let gn = t.l2_normalize_rows(global);
    let sim = t.matmul_t(tn, gn);
    let sim_t = symmetric.then(|| t.matmul_t(gn, tn));
    Ok(info_nce(t, sim, sim_t, b, tau))
}

/// Diagonal-target cross entropy over a B×B similarity matrix (rows are anchors).
fn info_nce<'p>(t: &mut Tape<'p>, sim: Var, sim_t: Option<Var>, b: usize, tau: f64) -> Var {
    let targets: Vec<Option<usize>> = (0..b).map(Some).collect();
    let logits = t.scale(sim, 1.0 / tau);
    let t2i = t.cross_entropy(logits, &targets, 1.0 / b as f64);
    let Some(sim_t) = sim_t else { return t2i };
    let logits_t = t.scale(sim_t, 1.0 / tau);
    let i2t = t.cross_entropy(logits_t, &targets, 1.0 / b as f64);
    t.weighted_sum(&[(t2i, 0.5), (i2t, 0.5)])
}

/// InfoNCE where every similarity comes from its own pairing: row `i·B + k` of
/// `text` and `global` holds text i and image k enhanced against each other.
pub fn contrastive_paired<'p>(t: &mut Tape<'p>, text: Var, global: Var, b: usize, tau: f64, symmetric: bool) -> Result<Var> {
    check_rows("paired text vectors", t.value(text))?;
    check_rows("paired global vectors", t.value(global))?;
    if b == 0 || t.shape(text).0 != b * b || t.shape(global).0 != b * b {
        return Err(Error::Shape(format!("paired features need {b}² rows, got {} and {}", t.shape(text).0, t.shape(global).0)));
    }
    let tn = t.l2_normalize_rows(text);
    let gn = t.l2_normalize_rows(global);
    let prod = t.mul(tn, gn);
    let ones = t.constant(Array2::ones((1, t.shape(prod).1)));
    let ones_col = t.constant(Array2::ones((t.shape(prod).1, 1)));
    let mut rows = Vec::with_capacity(b);
    let mut cols = Vec::with_capacity(b);
    for i in 0..b {
        let block = t.slice_rows(prod, i * b, b);
        rows.push(t.matmul_t(ones, block));
        if symmetric {
            cols.push(t.matmul(block, ones_col));
        }
    }
    let sim = t.concat_rows(&rows);
    let sim_t = symmetric.then(|| t.concat_cols(&cols));
    Ok(info_nce(t, sim, sim_t, b, tau))
}

/// `‖f_G* − mean_rows(f_P*)‖²`.
pub fn patch_coherence<'p>(t: &mut Tape<'p>, global: Var, patches: Var) -> Var {
    let m = t.mean_rows(patches);
    let d = t.sub(global, m);
    t.sum_squares(d)
}

/// Shifted targets for one sequence: logit row j predicts `target[j + 1]`.
pub fn shifted_targets(target: &[usize], pad_id: usize) -> Vec<Option<usize>> {
    (0..target.len())
        .map(|j| target.get(j + 1).copied().filter(|&y| y != pad_id))
        .collect()
}

/// Summed NLL of one sequence, pre-scaled by `scale` (the trainer passes 1/B).
pub fn description_nll<'p>(t: &mut Tape<'p>, logits: Var, target: &[usize], pad_id: usize, scale: f64) -> Result<Var> {
    let (rows, vocab) = t.shape(logits);
    if rows != target.len() {
        return Err(Error::Shape(format!("{rows} logit rows for a target of length {}", target.len())));
    }
    if let Some(bad) = target.iter().find(|&&y| y >= vocab) {
        return Err(Error::Contract(format!("target id {bad} outside vocabulary of {vocab}")));
    }
    Ok(t.cross_entropy(logits, &shifted_targets(target, pad_id), scale))
}

/// Array form of [`contrastive`].
pub fn contrastive_loss(text: &Array2<f64>, global: &Array2<f64>, tau: f64, symmetric: bool) -> Result<f64> {
    if text.nrows() == 0 {
        return Err(Error::Precondition("contrastive loss needs B ≥ 1".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Precondition(format!("tau must be positive, got {tau}")));
    }
    let mut t = Tape::new();
    let (a, b) = (t.constant(text.clone()), t.constant(global.clone()));
    let l = contrastive(&mut t, a, b, tau, symmetric)?;
    Ok(t.scalar(l))
}

/// Array form of [`patch_coherence`].
pub fn patch_coherence_loss(global: &Array2<f64>, patches: &Array2<f64>) -> Result<f64> {
    if patches.nrows() == 0 {
        return Err(Error::Precondition("patch coherence needs at least one patch row".into()));
    }
    if global.dim() != (1, patches.ncols()) {
        return Err(Error::Shape(format!("f_G* {:?} vs f_P* {:?}", global.dim(), patches.dim())));
    }
    let mut t = Tape::new();
    let (g, p) = (t.constant(global.clone()), t.constant(patches.clone()));
    let l = patch_coherence(&mut t, g, p);
    Ok(t.scalar(l))
}

/// Mean over sequences of the summed per-token NLL, PAD targets excluded.
pub fn description_loss(logits: &[Array2<f64>], targets: &[Vec<usize>], pad_id: usize) -> Result<f64> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::Shape(format!("{} logit blocks for {} targets", logits.len(), targets.len())));
    }
    let scale = 1.0 / logits.len() as f64;
    let mut t = Tape::new();
    let mut total = 0.0;
    for (l, y) in logits.iter().zip(targets) {
        let v = t.constant(l.clone());
        let nll = description_nll(&mut t, v, y, pad_id, scale)?;
        total += t.scalar(nll);
    }
    Ok(total)
}
