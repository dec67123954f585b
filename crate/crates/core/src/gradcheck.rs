//! Seeded comparison of analytic gradients against central differences.
//!
//! Each case draws a random batch of logits with old/new blocks, teacher and
//! label targets and a fitted posterior model, then checks every loss term
//! with respect to the logits and the combined loss with respect to all
//! parameters of a small random classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::ids::ClassId;
use crate::losses::{
    classification_loss, combined_loss, distillation_loss, fit_posterior_model, mutual_distillation_loss,
    smoothed_one_hot, LogitView, LossPart, LossWeights, PosteriorModel, TargetView,
};
use crate::model::Classifier;
use crate::numerics::{finite_diff_grad, max_relative_error, softmax_temp, DenseMatrix};

pub const TAU_GRID: [f64; 5] = [1.5, 2.0, 2.5, 3.0, 3.5];
const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-3;

/// Largest relative error seen for each term over all cases.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub cases: usize,
    pub distillation: f64,
    pub classification: f64,
    pub mutual: f64,
    pub combined: f64,
    pub network: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        [
            self.distillation,
            self.classification,
            self.mutual,
            self.combined,
            self.network,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

struct Case {
    tau: f64,
    n_old: usize,
    teacher: Vec<TargetView>,
    labels: Vec<TargetView>,
    flags: Vec<bool>,
    model: PosteriorModel,
}

impl Case {
    fn random(rng: &mut ChaCha8Rng, batch: usize, width: usize) -> Result<Self> {
        let n_old = rng.random_range(0..width);
        let n_new = width - n_old;
        let tau = TAU_GRID[rng.random_range(0..TAU_GRID.len())];
        let mut teacher = Vec::with_capacity(batch);
        let mut labels = Vec::with_capacity(batch);
        let mut flags = Vec::with_capacity(batch);
        for _ in 0..batch {
            let old = n_old > 0 && rng.random_bool(0.5);
            flags.push(old);
            if old {
                let raw: Vec<f64> = (0..n_old).map(|_| rng.random_range(-2.0..2.0)).collect();
                teacher.push(TargetView::old(softmax_temp(&raw, tau)?)?);
                let l = rng.random_range(0..n_old);
                labels.push(TargetView::old(smoothed_one_hot(l, n_old, tau)?)?);
            } else {
                teacher.push(TargetView::default());
                let l = rng.random_range(0..n_new);
                labels.push(TargetView::new_only(smoothed_one_hot(l, n_new, tau)?)?);
            }
        }
        let ids: Vec<ClassId> = (0..width as u32).map(ClassId).collect();
        let samples: Vec<Vec<Vec<f64>>> = (0..width)
            .map(|c| {
                (0..rng.random_range(2..=width + 3))
                    .map(|_| {
                        (0..width)
                            .map(|j| if j == c { 1.0 } else { 0.0 } + rng.random_range(-0.8..0.8))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let counts: Vec<usize> = (0..width).map(|_| rng.random_range(1..10)).collect();
        let model = fit_posterior_model(&ids, &samples, &counts, 1e-2, 2)?;
        Ok(Self {
            tau,
            n_old,
            teacher,
            labels,
            flags,
            model,
        })
    }

    fn views(&self, flat: &[f64], width: usize) -> Result<Vec<LogitView>> {
        flat.chunks(width)
            .map(|r| LogitView::split(r, self.n_old, self.tau))
            .collect()
    }

    fn term(&self, which: Term, views: &[LogitView]) -> Result<LossPart> {
        match which {
            Term::Distillation => distillation_loss(&self.teacher, views),
            Term::Classification => classification_loss(&self.labels, views),
            Term::Mutual => mutual_distillation_loss(&self.model, &self.labels, views, &self.flags),
            Term::Combined => {
                let c = classification_loss(&self.labels, views)?;
                let md = mutual_distillation_loss(&self.model, &self.labels, views, &self.flags)?;
                let d = distillation_loss(&self.teacher, views)?;
                let b = combined_loss(LossWeights::default(), &c, &md, &d)?;
                Ok(LossPart {
                    value: b.l_il,
                    grad: b.grad_logits,
                    skipped: 0,
                })
            }
        }
    }

    fn logit_error(&self, which: Term, logits: &[f64], width: usize) -> Result<f64> {
        let analytic = self.term(which, &self.views(logits, width)?)?.grad.into_vec();
        let numeric = finite_diff_grad(
            |x| {
                self.views(x, width)
                    .and_then(|v| self.term(which, &v))
                    .map_or(f64::NAN, |p| p.value)
            },
            logits,
            STEP,
        )?;
        Ok(max_relative_error(&analytic, &numeric, FLOOR))
    }
}

#[derive(Clone, Copy)]
enum Term {
    Distillation,
    Classification,
    Mutual,
    Combined,
}

fn network_error(case: &Case, rng: &mut ChaCha8Rng, batch: usize, width: usize) -> Result<f64> {
    let input = rng.random_range(2..6usize);
    let hidden = rng.random_range(3..7usize);
    let mut net = Classifier::new(&[input, hidden, hidden, width], rng.random())?;
    // small bias offsets keep pre-activations away from the rectifier kink
    let mut theta = net.parameters();
    theta.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    net.set_parameters(&theta)?;
    let x = DenseMatrix::new(
        batch,
        input,
        (0..batch * input).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )?;
    let logits = net.forward(&x)?;
    let part = case.term(Term::Combined, &case.views(logits.as_slice(), width)?)?;
    let analytic = net.backward(&part.grad)?.flatten();
    let mut scratch = net.clone();
    let numeric = finite_diff_grad(
        |t| {
            scratch
                .set_parameters(t)
                .and_then(|_| scratch.predict(&x))
                .and_then(|l| case.views(l.as_slice(), width))
                .and_then(|v| case.term(Term::Combined, &v))
                .map_or(f64::NAN, |p| p.value)
        },
        &theta,
        STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric, FLOOR))
}

/// Runs `cases` random checks from `seed`.
pub fn run_grad_check(cases: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        cases,
        ..GradCheckReport::default()
    };
    for _ in 0..cases {
        let width = rng.random_range(2..=8usize);
        let batch = rng.random_range(1..=6usize);
        let case = Case::random(&mut rng, batch, width)?;
        let logits: Vec<f64> = (0..batch * width).map(|_| rng.random_range(-3.0..3.0)).collect();
        for (slot, term) in [
            (&mut report.distillation, Term::Distillation),
            (&mut report.classification, Term::Classification),
            (&mut report.mutual, Term::Mutual),
            (&mut report.combined, Term::Combined),
        ] {
            *slot = slot.max(case.logit_error(term, &logits, width)?);
        }
        report.network = report.network.max(network_error(&case, &mut rng, batch, width)?);
    }
    Ok(report)
}
