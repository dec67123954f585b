//! The incremental objective and its parts.
//!
//! Every sample's logits are split into an old-class block (classes learned
//! in earlier increments) and a new-class block (classes added in the current
//! increment). Three terms act on them:
//!
//! * distillation: cross-entropy between the frozen teacher's tempered
//!   outputs and the student's tempered softmax over the old block;
//! * classification: KL divergence from the student's tempered softmax over
//!   the new block to the (smoothed) label distribution;
//! * mutual distillation: cross-entropy between the label distribution and
//!   the Bayes posterior of a per-class Gaussian model fitted over the
//!   concatenated tempered logits (see [`posterior`]).
//!
//! The weighted sum is `alpha * classification + beta * mutual + gamma *
//! distillation`. All gradients are returned with respect to the raw
//! (unscaled) logits, laid out as `[old block | new block]` per row.

pub mod posterior;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_temp, DenseMatrix};

pub use posterior::{
    bayes_posterior, empirical_prior, fit_posterior_model, mutual_distillation_loss, mutual_distillation_loss_live,
    posterior_from_log_likelihoods, PosteriorModel,
};

/// Label-smoothing mass at temperature 1; divided by `tau` for tempered targets.
pub const LABEL_SMOOTHING: f64 = 0.1;

/// A sample's raw logits split into old- and new-class blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitView {
    pub old_block: Vec<f64>,
    pub new_block: Vec<f64>,
    pub tau: f64,
}

impl LogitView {
    pub fn new(old_block: Vec<f64>, new_block: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self {
            old_block,
            new_block,
            tau,
        })
    }

    /// Splits one row of logits after `n_old` entries.
    pub fn split(row: &[f64], n_old: usize, tau: f64) -> Result<Self> {
        if n_old > row.len() {
            return Err(Error::Shape(format!(
                "{n_old} old classes but only {} logits",
                row.len()
            )));
        }
        Self::new(row[..n_old].to_vec(), row[n_old..].to_vec(), tau)
    }

    pub fn width(&self) -> usize {
        self.old_block.len() + self.new_block.len()
    }

    /// Concatenated tempered logits `[old | new] / tau`.
    pub fn scaled(&self) -> Vec<f64> {
        self.old_block
            .iter()
            .chain(&self.new_block)
            .map(|l| l / self.tau)
            .collect()
    }
}

/// Target distributions for the old and new blocks. An empty block means the
/// sample does not take part in the corresponding term.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TargetView {
    pub old_targets: Vec<f64>,
    pub new_targets: Vec<f64>,
}

impl TargetView {
    pub fn new(old_targets: Vec<f64>, new_targets: Vec<f64>) -> Result<Self> {
        for (name, block) in [("old", &old_targets), ("new", &new_targets)] {
            if block.is_empty() {
                continue;
            }
            if block.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::Parameter(format!("{name} targets must lie in [0, 1]")));
            }
            let total: f64 = block.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!("{name} targets sum to {total}, expected 1")));
            }
        }
        Ok(Self {
            old_targets,
            new_targets,
        })
    }

    pub fn old(targets: Vec<f64>) -> Result<Self> {
        Self::new(targets, Vec::new())
    }

    pub fn new_only(targets: Vec<f64>) -> Result<Self> {
        Self::new(Vec::new(), targets)
    }
}

/// One-hot label over `n` classes with `LABEL_SMOOTHING / tau` spread over
/// the other classes.
pub fn smoothed_one_hot(index: usize, n: usize, tau: f64) -> Result<Vec<f64>> {
    if index >= n {
        return Err(Error::Shape(format!("label {index} outside {n} classes")));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mass = LABEL_SMOOTHING / tau;
    let mut t = vec![mass / (n - 1) as f64; n];
    t[index] = 1.0 - mass;
    Ok(t)
}

/// Value of one loss term over a batch plus its gradient w.r.t. raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPart {
    pub value: f64,
    pub grad: DenseMatrix,
    /// Samples excluded from the term (e.g. their class had no fitted Gaussian).
    pub skipped: usize,
}

impl LossPart {
    pub fn zero(batch: usize, width: usize) -> Self {
        Self {
            value: 0.0,
            grad: DenseMatrix::zeros(batch, width),
            skipped: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.25,
            gamma: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Parameter(format!(
                    "loss weight {name} must be nonnegative, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub fn combine(&self, l_c: f64, l_md: f64, l_d: f64) -> f64 {
        self.alpha * l_c + self.beta * l_md + self.gamma * l_d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_d: f64,
    pub l_md: f64,
    pub l_il: f64,
    pub grad_logits: DenseMatrix,
}

fn check_batch(targets: usize, logits: usize) -> Result<()> {
    if targets != logits {
        return Err(Error::Shape(format!("{targets} target rows for {logits} logit rows")));
    }
    if logits == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

fn batch_width(student: &[LogitView]) -> Result<(usize, usize)> {
    let first = &student[0];
    let (n_old, n_new) = (first.old_block.len(), first.new_block.len());
    if student
        .iter()
        .any(|s| s.old_block.len() != n_old || s.new_block.len() != n_new)
    {
        return Err(Error::Shape("logit blocks differ across the batch".into()));
    }
    Ok((n_old, n_new))
}

/// Cross-entropy of student tempered softmax against teacher targets on the
/// old block. Samples with an empty teacher block contribute nothing; a batch
/// without old classes yields zero.
pub fn distillation_loss(teacher_targets: &[TargetView], student_logits: &[LogitView]) -> Result<LossPart> {
    check_batch(teacher_targets.len(), student_logits.len())?;
    let (n_old, n_new) = batch_width(student_logits)?;
    let batch = student_logits.len();
    let mut part = LossPart::zero(batch, n_old + n_new);
    if n_old == 0 {
        if teacher_targets.iter().any(|t| !t.old_targets.is_empty()) {
            return Err(Error::Shape(
                "teacher targets given for a student without old classes".into(),
            ));
        }
        return Ok(part);
    }
    let inv_b = 1.0 / batch as f64;
    for (k, (t, s)) in teacher_targets.iter().zip(student_logits).enumerate() {
        if t.old_targets.is_empty() {
            continue;
        }
        if t.old_targets.len() != n_old {
            return Err(Error::Shape(format!(
                "teacher covers {} old classes, student {}",
                t.old_targets.len(),
                n_old
            )));
        }
        let logp = log_softmax_temp(&s.old_block, s.tau)?;
        let mass: f64 = t.old_targets.iter().sum();
        let mut loss = 0.0;
        let grow = part.grad.row_mut(k);
        for j in 0..n_old {
            if t.old_targets[j] > 0.0 {
                loss -= t.old_targets[j] * logp[j];
            }
            grow[j] = inv_b * (logp[j].exp() * mass - t.old_targets[j]) / s.tau;
        }
        part.value += inv_b * loss;
    }
    Ok(part)
}

/// KL divergence from the student's tempered softmax over the new block to
/// the target distribution. Samples with an empty new-target block are
/// skipped (they are old exemplars).
pub fn classification_loss(targets: &[TargetView], student_logits: &[LogitView]) -> Result<LossPart> {
    check_batch(targets.len(), student_logits.len())?;
    let (n_old, n_new) = batch_width(student_logits)?;
    let batch = student_logits.len();
    let mut part = LossPart::zero(batch, n_old + n_new);
    let inv_b = 1.0 / batch as f64;
    for (k, (t, s)) in targets.iter().zip(student_logits).enumerate() {
        if t.new_targets.is_empty() {
            continue;
        }
        if t.new_targets.len() != n_new || n_new == 0 {
            return Err(Error::Shape(format!(
                "{} new targets for {} new logits",
                t.new_targets.len(),
                n_new
            )));
        }
        let logp = log_softmax_temp(&s.new_block, s.tau)?;
        let mass: f64 = t.new_targets.iter().sum();
        let mut loss = 0.0;
        let grow = part.grad.row_mut(k);
        for j in 0..n_new {
            let q = t.new_targets[j];
            if q > 0.0 {
                loss += q * (q.ln() - logp[j]);
            }
            grow[n_old + j] = inv_b * (logp[j].exp() * mass - q) / s.tau;
        }
        part.value += inv_b * loss;
    }
    // KL is nonnegative; rounding can leave a tiny negative residue
    part.value = part.value.max(0.0);
    Ok(part)
}

/// Plain softmax cross-entropy over the full head at temperature 1, used by
/// the fine-tuning reference arms.
pub fn cross_entropy_loss(logits: &DenseMatrix, labels: &[usize]) -> Result<LossPart> {
    check_batch(labels.len(), logits.rows())?;
    let width = logits.cols();
    let inv_b = 1.0 / logits.rows() as f64;
    let mut part = LossPart::zero(logits.rows(), width);
    for (k, &label) in labels.iter().enumerate() {
        if label >= width {
            return Err(Error::Shape(format!("label {label} outside {width} classes")));
        }
        let logp = log_softmax_temp(logits.row(k), 1.0)?;
        part.value -= inv_b * logp[label];
        let grow = part.grad.row_mut(k);
        for j in 0..width {
            grow[j] = inv_b * (logp[j].exp() - if j == label { 1.0 } else { 0.0 });
        }
    }
    Ok(part)
}

/// `L = alpha * classification + beta * mutual + gamma * distillation`, with
/// gradients combined by the same weights.
pub fn combined_loss(
    weights: LossWeights,
    classification: &LossPart,
    mutual: &LossPart,
    distillation: &LossPart,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut grad = DenseMatrix::zeros(classification.grad.rows(), classification.grad.cols());
    for (w, part) in [
        (weights.alpha, classification),
        (weights.beta, mutual),
        (weights.gamma, distillation),
    ] {
        if w != 0.0 {
            grad.add_scaled(w, &part.grad)?;
        } else if part.grad.rows() != grad.rows() || part.grad.cols() != grad.cols() {
            return Err(Error::Shape("loss part gradients differ in shape".into()));
        }
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite loss gradient".into()));
    }
    let l_il = weights.combine(classification.value, mutual.value, distillation.value);
    if !l_il.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (classification {}, mutual {}, distillation {})",
            classification.value, mutual.value, distillation.value
        )));
    }
    Ok(LossBreakdown {
        l_c: classification.value,
        l_d: distillation.value,
        l_md: mutual.value,
        l_il,
        grad_logits: grad,
    })
}
