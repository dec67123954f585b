//! The incremental trainer.
//!
//! A plan is an ordered list of increments. Disease increments add classes
//! within a domain; dataset increments add the classes of a new domain. Each
//! increment grows the classifier head, trains on replayed exemplars plus the
//! new-class subset, evaluates on the held-out split of every class seen so
//! far, snapshots the teacher and stores exemplars of the new classes.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::ids::{ClassId, DomainId};
use crate::losses::{
    classification_loss, combined_loss, cross_entropy_loss, distillation_loss, fit_posterior_model,
    mutual_distillation_loss, mutual_distillation_loss_live, smoothed_one_hot, LossPart, LossWeights, PosteriorModel,
    TargetView, LABEL_SMOOTHING,
};
use crate::metrics::{forgetting, tally, Counts, MetricRow};
use crate::model::{adadelta_step, AdadeltaConfig, Classifier, OptimizerState, TeacherSnapshot, DEFAULT_HIDDEN};
use crate::numerics::{softmax_temp, DenseMatrix, DEFAULT_SHRINKAGE};
use crate::replay::{build_increment_batches, select_exemplars, ExemplarStore};

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// The full objective.
    WithMd,
    /// The full objective with `beta = 0`.
    WithoutMd,
    /// Cross-entropy over the whole head on new-class data only.
    ExemplarFreeCe,
    /// Cross-entropy over the whole head on all training data seen so far.
    JointFineTune,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::WithMd, Arm::WithoutMd, Arm::ExemplarFreeCe, Arm::JointFineTune];

    pub fn name(self) -> &'static str {
        match self {
            Arm::WithMd => "with-md",
            Arm::WithoutMd => "without-md",
            Arm::ExemplarFreeCe => "exemplar-free-ce",
            Arm::JointFineTune => "joint-fine-tune",
        }
    }

    fn uses_cross_entropy(self) -> bool {
        matches!(self, Arm::ExemplarFreeCe | Arm::JointFineTune)
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncrementKind {
    Disease,
    Dataset,
}

/// When the per-class Gaussians over logits are refitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefreshCadence {
    /// Once at the start of every epoch, from the previous epoch's logits.
    #[default]
    Epoch,
    /// After every batch.
    Batch,
}

/// Whether the mutual term differentiates through the class statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsGradient {
    /// Means, covariances and priors are constants within a step.
    #[default]
    Frozen,
    /// The batch's own logits enter the class statistics and the gradient
    /// flows through them.
    Live,
}

fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    16
}
fn default_tau() -> f64 {
    2.0
}
fn default_alpha() -> f64 {
    LossWeights::default().alpha
}
fn default_beta() -> f64 {
    LossWeights::default().beta
}
fn default_gamma() -> f64 {
    LossWeights::default().gamma
}
fn default_fraction() -> f64 {
    0.1
}
fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}
fn default_shrinkage() -> f64 {
    DEFAULT_SHRINKAGE
}
fn default_min_fit() -> usize {
    2
}
fn default_rho() -> f64 {
    AdadeltaConfig::default().rho
}
fn default_eps() -> f64 {
    AdadeltaConfig::default().eps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementSpec {
    pub kind: IncrementKind,
    pub classes: Vec<ClassId>,
    pub domain: DomainId,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Share of each new class kept as exemplars after the increment.
    #[serde(default = "default_fraction")]
    pub exemplar_fraction: f64,
    /// Share of each new class's training data used during the increment.
    #[serde(default = "default_fraction")]
    pub new_fraction: f64,
    /// Overrides the seed derived from the plan seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl IncrementSpec {
    pub fn new(kind: IncrementKind, classes: Vec<ClassId>, domain: DomainId) -> Self {
        Self {
            kind,
            classes,
            domain,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            tau: default_tau(),
            alpha: default_alpha(),
            beta: default_beta(),
            gamma: default_gamma(),
            exemplar_fraction: default_fraction(),
            new_fraction: default_fraction(),
            seed: None,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let at = |m: String| Error::Config(format!("increment {}: {m}", index + 1));
        if self.classes.is_empty() {
            return Err(at("no classes".into()));
        }
        if self.epochs == 0 {
            return Err(at("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(at(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        // label smoothing puts mass 0.1/τ off the target, so τ must exceed 0.1
        if !(self.tau > LABEL_SMOOTHING && self.tau.is_finite()) {
            return Err(at(format!("tau must exceed {LABEL_SMOOTHING}, got {}", self.tau)));
        }
        self.weights().validate().map_err(|e| at(e.to_string()))?;
        for (name, f) in [
            ("exemplar_fraction", self.exemplar_fraction),
            ("new_fraction", self.new_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(at(format!("{name} must be in (0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementPlan {
    #[serde(default)]
    pub increments: Vec<IncrementSpec>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Shrinkage added to every logit covariance.
    #[serde(default = "default_shrinkage")]
    pub shrinkage: f64,
    /// Classes with fewer buffered logit vectors than this get no Gaussian.
    #[serde(default = "default_min_fit")]
    pub min_fit_samples: usize,
    #[serde(default)]
    pub refresh: RefreshCadence,
    #[serde(default)]
    pub stats_gradient: StatsGradient,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eps")]
    pub adadelta_eps: f64,
    /// Lets dataset increments list class ids learned in an earlier domain.
    #[serde(default)]
    pub shared_labels: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for IncrementPlan {
    fn default() -> Self {
        Self {
            increments: Vec::new(),
            hidden: default_hidden(),
            shrinkage: default_shrinkage(),
            min_fit_samples: default_min_fit(),
            refresh: RefreshCadence::default(),
            stats_gradient: StatsGradient::default(),
            rho: default_rho(),
            adadelta_eps: default_eps(),
            shared_labels: false,
            seed: 0,
        }
    }
}

impl IncrementPlan {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage.is_finite()) {
            return Err(Error::Config(format!(
                "shrinkage must be positive, got {}",
                self.shrinkage
            )));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1), got {}", self.rho)));
        }
        if !(self.adadelta_eps > 0.0 && self.adadelta_eps.is_finite()) {
            return Err(Error::Config(format!(
                "adadelta_eps must be positive, got {}",
                self.adadelta_eps
            )));
        }
        let mut seen_classes = BTreeSet::new();
        let mut seen_domains = BTreeSet::new();
        for (i, inc) in self.increments.iter().enumerate() {
            inc.validate(i)?;
            if inc.kind == IncrementKind::Dataset && seen_domains.contains(&inc.domain) {
                return Err(Error::Config(format!(
                    "increment {}: dataset increment revisits domain {}",
                    i + 1,
                    inc.domain
                )));
            }
            let mut local = BTreeSet::new();
            for c in &inc.classes {
                if !local.insert(*c) {
                    return Err(Error::Config(format!("increment {}: class {c} listed twice", i + 1)));
                }
                let reuse_ok = self.shared_labels && inc.kind == IncrementKind::Dataset;
                if seen_classes.contains(c) && !reuse_ok {
                    return Err(Error::Config(format!(
                        "increment {}: class {c} already learned in an earlier increment",
                        i + 1
                    )));
                }
            }
            seen_classes.extend(inc.classes.iter().copied());
            seen_domains.insert(inc.domain);
        }
        Ok(())
    }

    /// The same plan with every increment at temperature `tau`.
    pub fn with_tau(&self, tau: f64) -> Self {
        let mut p = self.clone();
        p.increments.iter_mut().for_each(|i| i.tau = tau);
        p
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn increment_seed(&self, index: usize) -> u64 {
        self.increments[index]
            .seed
            .unwrap_or_else(|| derive_seed(self.seed, &[index as u64]))
    }
}

/// Deterministic child seed for a tagged sub-stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    for &t in tags {
        rng.set_stream(t.wrapping_add(1));
        rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    }
    rng.next_u64()
}

/// Loss parts averaged over the batches of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub l_c: f64,
    pub l_d: f64,
    pub l_md: f64,
    pub l_il: f64,
    /// Samples left out of the mutual term because their class had no Gaussian.
    pub md_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub accuracy: f64,
    pub tpr: f64,
    pub ppv: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl RateSet {
    fn from_counts(c: &Counts) -> Self {
        let (a, t, p, f) = (c.accuracy(), c.tpr(), c.ppv(), c.f1());
        Self {
            accuracy: a.value,
            tpr: t.value,
            ppv: p.value,
            f1: f.value,
            degenerate: a.degenerate || t.degenerate || p.degenerate || f.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub class: ClassId,
    pub domain: DomainId,
    pub samples: u64,
    /// One-vs-rest counts-based metrics; `tpr` is the class's own accuracy.
    pub rates: RateSet,
    /// Clamped drop in `tpr` since the previous evaluation.
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEval {
    pub domain: DomainId,
    pub samples: u64,
    pub accuracy: f64,
    /// Mean one-vs-rest rates over the domain's classes.
    #[serde(rename = "macro")]
    pub macro_: RateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: u64,
    /// Fraction of held-out samples labelled correctly.
    pub accuracy: f64,
    pub micro: RateSet,
    #[serde(rename = "macro")]
    pub macro_: RateSet,
    pub per_class: Vec<ClassEval>,
    pub per_domain: Vec<DomainEval>,
    /// Accuracy on samples of classes learned before this increment.
    pub old_class_accuracy: Option<f64>,
    /// Mean clamped drop over old classes since the previous increment.
    pub forgetting: Option<f64>,
}

impl Evaluation {
    pub fn class_accuracy(&self, class: ClassId) -> Option<f64> {
        self.per_class.iter().find(|c| c.class == class).map(|c| c.rates.tpr)
    }

    pub fn domain(&self, domain: DomainId) -> Option<&DomainEval> {
        self.per_domain.iter().find(|d| d.domain == domain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementLog {
    pub schema_version: u32,
    /// 1-based position in the plan.
    pub increment: usize,
    pub kind: IncrementKind,
    pub domain: DomainId,
    pub arm: Arm,
    pub new_classes: Vec<ClassId>,
    /// Head size before and after expansion.
    pub head_before: usize,
    pub head_after: usize,
    pub tau: f64,
    /// Weights actually applied; cross-entropy arms log `(1, 0, 0)`.
    pub weights: LossWeights,
    pub seed: u64,
    pub train_old: usize,
    pub train_new: usize,
    /// Whether old-class logits survived head expansion bit for bit.
    pub expansion_preserved: Option<bool>,
    pub epochs: Vec<EpochLog>,
    pub evaluation: Evaluation,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl IncrementLog {
    /// Largest deviation of a logged `l_il` from the weighted sum of its parts.
    pub fn bookkeeping_error(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| (e.l_il - self.weights.combine(e.l_c, e.l_md, e.l_d)).abs())
            .fold(0.0, f64::max)
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let ev = &self.evaluation;
        let row = |domain: String, class: String, r: &RateSet, forgetting: Option<f64>| MetricRow {
            increment: self.increment,
            domain,
            class,
            accuracy: r.accuracy,
            tpr: r.tpr,
            ppv: r.ppv,
            f1: r.f1,
            forgetting,
        };
        let mut rows: Vec<MetricRow> = ev
            .per_class
            .iter()
            .map(|c| row(c.domain.to_string(), c.class.to_string(), &c.rates, c.forgetting))
            .collect();
        for d in &ev.per_domain {
            rows.push(MetricRow {
                increment: self.increment,
                domain: d.domain.to_string(),
                class: "all".into(),
                accuracy: d.accuracy,
                tpr: d.macro_.tpr,
                ppv: d.macro_.ppv,
                f1: d.macro_.f1,
                forgetting: None,
            });
        }
        rows.push(row("all".into(), "micro".into(), &ev.micro, ev.forgetting));
        rows.push(row("all".into(), "macro".into(), &ev.macro_, ev.forgetting));
        rows
    }
}

/// Everything threaded from one increment to the next.
#[derive(Debug, Clone, Default)]
pub struct LearnerState {
    pub model: Option<Classifier>,
    pub optimizer: Option<OptimizerState>,
    pub teacher: Option<TeacherSnapshot>,
    pub store: ExemplarStore,
    /// Class of every head output, in output order.
    pub head: Vec<ClassId>,
    pub domains: Vec<DomainId>,
    /// Per-class accuracy at the latest evaluation.
    pub last_accuracy: BTreeMap<ClassId, f64>,
}

impl LearnerState {
    fn head_index(&self) -> BTreeMap<ClassId, usize> {
        self.head.iter().enumerate().map(|(i, c)| (*c, i)).collect()
    }
}

/// Settings shared by all increments of one run.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub plan: &'a IncrementPlan,
    pub data: &'a Dataset,
    pub arm: Arm,
}

fn samples_of(data: &Dataset, split: Split, classes: &[ClassId], domain: Option<DomainId>) -> Vec<Sample> {
    data.select(split, classes)
        .into_iter()
        .filter(|s| domain.is_none_or(|d| s.domain == d))
        .collect()
}

fn stack(samples: &[&Sample], dim: usize) -> Result<DenseMatrix> {
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        data.extend_from_slice(&s.features);
    }
    DenseMatrix::new(samples.len(), dim, data)
}

fn fit_buffer(plan: &IncrementPlan, head: &[ClassId], buffer: &[Vec<f64>], labels: &[usize]) -> Result<PosteriorModel> {
    let mut per_class = vec![Vec::new(); head.len()];
    for (z, &l) in buffer.iter().zip(labels) {
        per_class[l].push(z.clone());
    }
    let counts: Vec<usize> = per_class.iter().map(Vec::len).collect();
    // a class with no buffered logits keeps a placeholder Gaussian and is
    // marked unfit through its zero count
    let placeholder = vec![vec![0.0; head.len()]];
    let samples: Vec<Vec<Vec<f64>>> = per_class
        .into_iter()
        .map(|s| if s.is_empty() { placeholder.clone() } else { s })
        .collect();
    let min_fit = plan.min_fit_samples;
    let mut model = fit_posterior_model(head, &samples, &counts, plan.shrinkage, min_fit)?;
    if counts.contains(&0) {
        let unfit: Vec<bool> = counts.iter().map(|&c| c < min_fit.max(1)).collect();
        model = PosteriorModel::new(model.gaussians().to_vec(), model.priors().to_vec(), unfit)?;
    }
    Ok(model)
}

/// Predicted class of every row, by argmax over the head.
fn predict_classes(model: &Classifier, samples: &[&Sample], head: &[ClassId], dim: usize) -> Result<Vec<ClassId>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let logits = model.predict(&stack(samples, dim)?)?;
    Ok(logits
        .iter_rows()
        .map(|r| head[crate::numerics::argmax(r).expect("nonempty head")])
        .collect())
}

pub fn evaluate(
    model: &Classifier,
    state_head: &[ClassId],
    test: &[Sample],
    class_domains: &BTreeMap<ClassId, DomainId>,
    old_classes: &[ClassId],
    previous: &BTreeMap<ClassId, f64>,
) -> Result<Evaluation> {
    let dim = model.input_size();
    let refs: Vec<&Sample> = test.iter().collect();
    let preds = predict_classes(model, &refs, state_head, dim)?;
    let truths: Vec<ClassId> = test.iter().map(|s| s.label).collect();
    let counts = tally(&preds, &truths, state_head)?;

    let per_class: Vec<ClassEval> = counts
        .classes
        .iter()
        .zip(&counts.per_class)
        .map(|(c, k)| {
            let rates = RateSet::from_counts(k);
            ClassEval {
                class: *c,
                domain: class_domains.get(c).copied().unwrap_or_default(),
                samples: k.tp + k.fn_,
                forgetting: previous.get(c).map(|b| (b - rates.tpr).max(0.0)),
                rates,
            }
        })
        .collect();

    let mut domains: Vec<DomainId> = test.iter().map(|s| s.domain).collect();
    domains.sort();
    domains.dedup();
    let mut per_domain = Vec::new();
    for d in domains {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].domain == d).collect();
        let p: Vec<ClassId> = idx.iter().map(|&i| preds[i]).collect();
        let t: Vec<ClassId> = idx.iter().map(|&i| truths[i]).collect();
        let sub = tally(&p, &t, state_head)?;
        let own: Vec<Counts> = sub
            .classes
            .iter()
            .zip(&sub.per_class)
            .filter(|(c, _)| class_domains.get(c) == Some(&d))
            .map(|(_, k)| *k)
            .collect();
        per_domain.push(DomainEval {
            domain: d,
            samples: idx.len() as u64,
            accuracy: sub.overall_accuracy().value,
            macro_: macro_rates(&own),
        });
    }

    let old_class_accuracy = if old_classes.is_empty() {
        None
    } else {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| old_classes.contains(&truths[i])).collect();
        let right = idx.iter().filter(|&&i| preds[i] == truths[i]).count();
        Some(if idx.is_empty() {
            0.0
        } else {
            right as f64 / idx.len() as f64
        })
    };
    let before: Vec<f64> = old_classes.iter().filter_map(|c| previous.get(c).copied()).collect();
    let after: Vec<f64> = old_classes
        .iter()
        .filter(|c| previous.contains_key(c))
        .map(|c| per_class.iter().find(|e| e.class == *c).map_or(0.0, |e| e.rates.tpr))
        .collect();
    let forgetting = if before.is_empty() {
        None
    } else {
        Some(forgetting(&before, &after)?)
    };

    Ok(Evaluation {
        samples: counts.samples,
        accuracy: counts.overall_accuracy().value,
        micro: RateSet::from_counts(&counts.micro()),
        macro_: macro_rates(&counts.per_class),
        per_class,
        per_domain,
        old_class_accuracy,
        forgetting,
    })
}

fn macro_rates(per_class: &[Counts]) -> RateSet {
    let n = per_class.len().max(1) as f64;
    let sets: Vec<RateSet> = per_class.iter().map(RateSet::from_counts).collect();
    RateSet {
        accuracy: sets.iter().map(|s| s.accuracy).sum::<f64>() / n,
        tpr: sets.iter().map(|s| s.tpr).sum::<f64>() / n,
        ppv: sets.iter().map(|s| s.ppv).sum::<f64>() / n,
        f1: sets.iter().map(|s| s.f1).sum::<f64>() / n,
        degenerate: sets.iter().any(|s| s.degenerate),
    }
}

#[derive(Default)]
struct EpochTotals {
    batches: usize,
    l_c: f64,
    l_d: f64,
    l_md: f64,
    l_il: f64,
    md_skipped: usize,
}

/// Runs one increment of the plan, consuming and returning the learner state.
pub fn run_increment(
    mut state: LearnerState,
    index: usize,
    ctx: RunContext<'_>,
) -> Result<(LearnerState, IncrementLog)> {
    let started = Instant::now();
    let plan = ctx.plan;
    let spec = &plan.increments[index];
    spec.validate(index)?;
    let data = ctx.data;
    let dim = data.dim();
    let seed = plan.increment_seed(index);
    let tau = spec.tau;

    if spec.kind == IncrementKind::Dataset && state.domains.contains(&spec.domain) {
        return Err(Error::Config(format!(
            "increment {}: domain {} was already learned",
            index + 1,
            spec.domain
        )));
    }
    let novel: Vec<ClassId> = spec
        .classes
        .iter()
        .copied()
        .filter(|c| !state.head.contains(c))
        .collect();
    if novel.len() < spec.classes.len() && !(plan.shared_labels && spec.kind == IncrementKind::Dataset) {
        return Err(Error::State(format!(
            "increment {}: classes overlap the current head",
            index + 1
        )));
    }

    let new_train = samples_of(data, Split::Train, &spec.classes, Some(spec.domain));
    for c in &spec.classes {
        if !new_train.iter().any(|s| s.label == *c) {
            return Err(Error::Data(format!(
                "increment {}: no training samples for class {c} in domain {}",
                index + 1,
                spec.domain
            )));
        }
    }

    // Training populations for this arm.
    let (old_pool, new_pool): (ExemplarStore, Vec<Sample>) = match ctx.arm {
        Arm::WithMd | Arm::WithoutMd => {
            let subset = select_exemplars(&new_train, spec.new_fraction, derive_seed(seed, &[1]))?;
            (state.store.clone(), subset.iter().cloned().collect())
        }
        Arm::ExemplarFreeCe => {
            let subset = select_exemplars(&new_train, spec.new_fraction, derive_seed(seed, &[1]))?;
            (ExemplarStore::empty(0), subset.iter().cloned().collect())
        }
        Arm::JointFineTune => {
            let old: Vec<Sample> = samples_of(data, Split::Train, &state.head, None)
                .into_iter()
                .filter(|s| state.domains.contains(&s.domain))
                .collect();
            let store = if old.is_empty() {
                ExemplarStore::empty(0)
            } else {
                select_exemplars(&old, 1.0, 0)?
            };
            (store, new_train.clone())
        }
    };

    // Head expansion.
    let n_old = state.head.len();
    let test_before: Vec<Sample> = samples_of(data, Split::Test, &state.head, None);
    let mut expansion_preserved = None;
    let init_seed = derive_seed(seed, &[0]);
    let mut model = match state.model.take() {
        None => {
            let mut sizes = vec![dim];
            sizes.extend(&plan.hidden);
            sizes.push(novel.len());
            Classifier::new(&sizes, init_seed)?
        }
        Some(m) if novel.is_empty() => m,
        Some(m) => {
            let probe = if test_before.is_empty() {
                None
            } else {
                let refs: Vec<&Sample> = test_before.iter().collect();
                let x = stack(&refs, dim)?;
                Some((m.predict(&x)?, x))
            };
            let grown = m.expand_head(novel.len(), init_seed)?;
            if let Some((before, x)) = probe {
                let after = grown.predict(&x)?;
                let same = (0..before.rows()).all(|r| {
                    before
                        .row(r)
                        .iter()
                        .zip(&after.row(r)[..n_old])
                        .all(|(a, b)| a.to_bits() == b.to_bits())
                });
                if !same {
                    return Err(Error::State("head expansion changed old-class logits".into()));
                }
                expansion_preserved = Some(true);
            }
            grown
        }
    };
    let mut optimizer = match state.optimizer.take() {
        None => OptimizerState::new(
            &model,
            AdadeltaConfig {
                rho: plan.rho,
                eps: plan.adadelta_eps,
            },
        )?,
        Some(mut o) => {
            if !novel.is_empty() {
                o.grow_head(novel.len());
            }
            o
        }
    };
    state.head.extend(novel.iter().copied());
    let head = state.head.clone();
    let head_index = state.head_index();
    let n_new = head.len() - n_old;

    // Samples in union order (exemplars first), as the batch builder sees them.
    let union: Vec<&Sample> = old_pool.iter().chain(new_pool.iter()).collect();
    let union_labels: Vec<usize> = union.iter().map(|s| head_index[&s.label]).collect();
    let union_old: Vec<bool> = union_labels.iter().map(|&l| l < n_old).collect();
    let mut class_counts = vec![0usize; head.len()];
    union_labels.iter().for_each(|&l| class_counts[l] += 1);

    let cross_entropy = ctx.arm.uses_cross_entropy();
    let weights = if cross_entropy {
        LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
        }
    } else if ctx.arm == Arm::WithoutMd {
        LossWeights {
            beta: 0.0,
            ..spec.weights()
        }
    } else {
        spec.weights()
    };
    let use_md = !cross_entropy && weights.beta > 0.0;
    let use_d = !cross_entropy && n_old > 0 && state.teacher.is_some();

    // Label targets: old-block one-hot for known classes, new-block otherwise.
    let label_targets: Vec<TargetView> = union_labels
        .iter()
        .map(|&l| {
            if l < n_old {
                TargetView::old(smoothed_one_hot(l, n_old, tau)?)
            } else {
                TargetView::new_only(smoothed_one_hot(l - n_old, n_new, tau)?)
            }
        })
        .collect::<Result<_>>()?;
    // The teacher is frozen for the whole increment, so its targets are fixed.
    let teacher_targets: Vec<TargetView> = match (&state.teacher, use_d) {
        (Some(teacher), true) => {
            let t_logits = teacher.predict(&stack(&union, dim)?)?;
            // Distillation covers exemplars of previously learned classes only.
            t_logits
                .iter_rows()
                .zip(&union_old)
                .map(|(r, &old)| {
                    if old {
                        softmax_temp(r, tau).and_then(TargetView::old)
                    } else {
                        Ok(TargetView::default())
                    }
                })
                .collect::<Result<_>>()?
        }
        _ => vec![TargetView::default(); union.len()],
    };

    // Rolling buffer of tempered logits, seeded by one forward pass.
    let mut buffer: Vec<Vec<f64>> = if use_md {
        model
            .predict(&stack(&union, dim)?)?
            .iter_rows()
            .map(|r| r.iter().map(|v| v / tau).collect())
            .collect()
    } else {
        Vec::new()
    };

    let mut epochs = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let mut posterior = if use_md {
            Some(fit_buffer(plan, &head, &buffer, &union_labels)?)
        } else {
            None
        };
        let batches = build_increment_batches(
            &old_pool,
            &new_pool,
            spec.batch_size,
            derive_seed(seed, &[2, epoch as u64]),
        )?;
        let mut totals = EpochTotals::default();
        for (b, batch) in batches.iter().enumerate() {
            let where_ = || format!("increment {}, epoch {}, batch {}", index + 1, epoch + 1, b + 1);
            let logits = model.forward(&batch.features)?;
            let rows = batch.positions.len();
            let breakdown = if cross_entropy {
                let labels: Vec<usize> = batch.positions.iter().map(|&p| union_labels[p]).collect();
                let part = cross_entropy_loss(&logits, &labels)?;
                let zero = LossPart::zero(rows, head.len());
                combined_loss(weights, &part, &zero, &zero)
            } else {
                let views = logits
                    .iter_rows()
                    .map(|r| crate::losses::LogitView::split(r, n_old, tau))
                    .collect::<Result<Vec<_>>>()?;
                let labels: Vec<TargetView> = batch.positions.iter().map(|&p| label_targets[p].clone()).collect();
                let l_c = classification_loss(&labels, &views)?;
                let l_d = if use_d {
                    let t: Vec<TargetView> = batch.positions.iter().map(|&p| teacher_targets[p].clone()).collect();
                    distillation_loss(&t, &views)?
                } else {
                    LossPart::zero(rows, head.len())
                };
                let flags: Vec<bool> = batch.positions.iter().map(|&p| union_old[p]).collect();
                let l_md = match (&posterior, plan.stats_gradient) {
                    (None, _) => LossPart::zero(rows, head.len()),
                    (Some(pm), StatsGradient::Frozen) => mutual_distillation_loss(pm, &labels, &views, &flags)?,
                    (Some(_), StatsGradient::Live) => {
                        let in_batch: BTreeSet<usize> = batch.positions.iter().copied().collect();
                        let mut fixed = vec![Vec::new(); head.len()];
                        for (p, z) in buffer.iter().enumerate() {
                            if !in_batch.contains(&p) {
                                fixed[union_labels[p]].push(z.clone());
                            }
                        }
                        let batch_labels: Vec<usize> = batch.positions.iter().map(|&p| union_labels[p]).collect();
                        mutual_distillation_loss_live(
                            &head,
                            &fixed,
                            &class_counts,
                            plan.shrinkage,
                            plan.min_fit_samples,
                            &labels,
                            &views,
                            &flags,
                            &batch_labels,
                        )?
                    }
                };
                totals.md_skipped += l_md.skipped;
                combined_loss(weights, &l_c, &l_md, &l_d)
            };
            let breakdown = breakdown.map_err(|e| {
                Error::Numeric(format!(
                    "{}: {e}; last finished epoch: {}",
                    where_(),
                    epochs.last().map_or("none".to_string(), |e: &EpochLog| format!(
                        "l_c {} l_d {} l_md {} l_il {}",
                        e.l_c, e.l_d, e.l_md, e.l_il
                    ))
                ))
            })?;
            let grads = model.backward(&breakdown.grad_logits)?;
            adadelta_step(&mut model, &grads, &mut optimizer)
                .map_err(|e| Error::Numeric(format!("{}: {e}", where_())))?;
            totals.batches += 1;
            totals.l_c += breakdown.l_c;
            totals.l_d += breakdown.l_d;
            totals.l_md += breakdown.l_md;
            totals.l_il += breakdown.l_il;
            if use_md {
                for (r, &p) in batch.positions.iter().enumerate() {
                    buffer[p] = logits.row(r).iter().map(|v| v / tau).collect();
                }
                if plan.refresh == RefreshCadence::Batch {
                    posterior = Some(fit_buffer(plan, &head, &buffer, &union_labels)?);
                }
            }
        }
        let n = totals.batches as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            batches: totals.batches,
            l_c: totals.l_c / n,
            l_d: totals.l_d / n,
            l_md: totals.l_md / n,
            l_il: totals.l_il / n,
            md_skipped: totals.md_skipped,
        };
        if ![log.l_c, log.l_d, log.l_md, log.l_il].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "increment {}, epoch {}: non-finite epoch mean (l_c {} l_d {} l_md {} l_il {})",
                index + 1,
                log.epoch,
                log.l_c,
                log.l_d,
                log.l_md,
                log.l_il
            )));
        }
        epochs.push(log);
    }

    // Evaluation on the held-out split of every class seen so far.
    state.domains.push(spec.domain);
    state.domains.sort();
    state.domains.dedup();
    let test: Vec<Sample> = samples_of(data, Split::Test, &head, None)
        .into_iter()
        .filter(|s| state.domains.contains(&s.domain))
        .collect();
    let class_domains = data.class_domains();
    let old_classes = head[..n_old].to_vec();
    let evaluation = evaluate(&model, &head, &test, &class_domains, &old_classes, &state.last_accuracy)?;
    for c in &evaluation.per_class {
        state.last_accuracy.insert(c.class, c.rates.tpr);
    }

    // Hand over to the next increment.
    state.teacher = Some(model.snapshot());
    let kept = select_exemplars(&new_train, spec.exemplar_fraction, derive_seed(seed, &[3]))?;
    state.store.merge(kept);
    state.model = Some(model);
    state.optimizer = Some(optimizer);

    let log = IncrementLog {
        schema_version: LOG_SCHEMA_VERSION,
        increment: index + 1,
        kind: spec.kind,
        domain: spec.domain,
        arm: ctx.arm,
        new_classes: spec.classes.clone(),
        head_before: n_old,
        head_after: head.len(),
        tau,
        weights,
        seed,
        train_old: old_pool.len(),
        train_new: new_pool.len(),
        expansion_preserved,
        epochs,
        evaluation,
        wall_time: started.elapsed(),
    };
    Ok((state, log))
}

/// A dataset increment: same mechanics, new classes come from a new domain.
pub fn run_dataset_increment(
    state: LearnerState,
    index: usize,
    ctx: RunContext<'_>,
) -> Result<(LearnerState, IncrementLog)> {
    if ctx.plan.increments[index].kind != IncrementKind::Dataset {
        return Err(Error::Config(format!(
            "increment {} is not a dataset increment",
            index + 1
        )));
    }
    run_increment(state, index, ctx)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub logs: Vec<IncrementLog>,
    pub state: LearnerState,
    /// Mean clamped drop, over classes learned before the last increment,
    /// from their accuracy right after learning to their final accuracy.
    pub final_forgetting: Option<f64>,
}

/// Checks that every class/domain pair of the plan has data.
pub fn resolve_plan(plan: &IncrementPlan, data: &Dataset) -> Result<()> {
    plan.validate()?;
    let mut present = BTreeSet::new();
    for i in 0..data.len() {
        present.insert((data.labels()[i], data.domains()[i], data.splits()[i]));
    }
    for (i, inc) in plan.increments.iter().enumerate() {
        for c in &inc.classes {
            for split in [Split::Train, Split::Test] {
                if !present.contains(&(*c, inc.domain, split)) {
                    return Err(Error::Config(format!(
                        "increment {}: class {c} has no {} samples in domain {}",
                        i + 1,
                        if split == Split::Train { "training" } else { "test" },
                        inc.domain
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn run_plan(plan: &IncrementPlan, data: &Dataset, arm: Arm) -> Result<RunOutcome> {
    resolve_plan(plan, data)?;
    let ctx = RunContext { plan, data, arm };
    let mut state = LearnerState::default();
    let mut logs = Vec::with_capacity(plan.increments.len());
    for i in 0..plan.increments.len() {
        let (next, log) = run_increment(state, i, ctx)?;
        state = next;
        logs.push(log);
    }
    let final_forgetting = final_forgetting(&logs, None)?;
    Ok(RunOutcome {
        logs,
        state,
        final_forgetting,
    })
}

/// Mean clamped drop, over classes not in the last increment, from each
/// class's accuracy right after it was (last) learned to its final accuracy.
/// `domain` restricts the mean to that domain's classes.
pub fn final_forgetting(logs: &[IncrementLog], domain: Option<DomainId>) -> Result<Option<f64>> {
    let Some(last) = logs.last() else {
        return Ok(None);
    };
    let mut learned = BTreeMap::new();
    for log in logs {
        for c in &log.evaluation.per_class {
            if log.new_classes.contains(&c.class) {
                learned.insert(c.class, c.rates.tpr);
            }
        }
    }
    let mut before = Vec::new();
    let mut after = Vec::new();
    for c in &last.evaluation.per_class {
        if last.new_classes.contains(&c.class) || domain.is_some_and(|d| d != c.domain) {
            continue;
        }
        let Some(&b) = learned.get(&c.class) else {
            return Err(Error::Data(format!("class {} evaluated but never learned", c.class)));
        };
        before.push(b);
        after.push(c.rates.tpr);
    }
    if before.is_empty() {
        Ok(None)
    } else {
        forgetting(&before, &after).map(Some)
    }
}

#[cfg(test)]
mod tests;
