//! Bayes posteriors over classes from per-class Gaussian likelihoods of the
//! concatenated tempered logits, and the mutual-distillation loss built on
//! them.
//!
//! The Gaussians are fitted from logits the student produced earlier in the
//! increment and are treated as constants when differentiating the loss.

use crate::error::{Error, Result};
use crate::ids::ClassId;
use crate::numerics::{estimate_class_stats, logsumexp, ClassGaussian, DenseMatrix};

use super::{LogitView, LossPart, TargetView};

/// Class-conditional Gaussians plus class priors over one logit space.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    class_ids: Vec<ClassId>,
    gaussians: Vec<ClassGaussian>,
    priors: Vec<f64>,
    /// Classes with too few samples to be trusted; they receive zero
    /// posterior mass and samples labelled with them are skipped.
    unfit: Vec<bool>,
}

impl PosteriorModel {
    pub fn new(gaussians: Vec<ClassGaussian>, priors: Vec<f64>, unfit: Vec<bool>) -> Result<Self> {
        if gaussians.is_empty() {
            return Err(Error::Parameter("posterior model without classes".into()));
        }
        if priors.len() != gaussians.len() || unfit.len() != gaussians.len() {
            return Err(Error::Shape(format!(
                "{} Gaussians, {} priors, {} fit flags",
                gaussians.len(),
                priors.len(),
                unfit.len()
            )));
        }
        let dim = gaussians[0].dim();
        if gaussians.iter().any(|g| g.dim() != dim) {
            return Err(Error::Shape("class Gaussians differ in dimension".into()));
        }
        let total: f64 = priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 || priors.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Parameter(format!("priors sum to {total}, expected 1")));
        }
        let class_ids = gaussians.iter().map(|g| g.class_id).collect::<Vec<_>>();
        let mut sorted = class_ids.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != class_ids.len() {
            return Err(Error::Parameter("duplicate class id in posterior model".into()));
        }
        Ok(Self {
            class_ids,
            gaussians,
            priors,
            unfit,
        })
    }

    pub fn dim(&self) -> usize {
        self.gaussians[0].dim()
    }

    pub fn num_classes(&self) -> usize {
        self.gaussians.len()
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn gaussians(&self) -> &[ClassGaussian] {
        &self.gaussians
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn is_fit(&self, class: usize) -> bool {
        !self.unfit[class]
    }

    fn log_likelihoods(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Shape(format!(
                "logit vector of dimension {} for a {}-dimensional model",
                z.len(),
                self.dim()
            )));
        }
        self.gaussians
            .iter()
            .zip(&self.unfit)
            .map(|(g, &unfit)| if unfit { Ok(f64::NEG_INFINITY) } else { g.logpdf(z) })
            .collect()
    }

    /// Log posteriors `log p(d_i | z)`; unfit classes get `-inf`.
    pub fn log_posterior(&self, z: &[f64]) -> Result<Vec<f64>> {
        let ll = self.log_likelihoods(z)?;
        posterior_log_space(&ll, &self.priors)
    }
}

fn posterior_log_space(log_likelihoods: &[f64], priors: &[f64]) -> Result<Vec<f64>> {
    if log_likelihoods.len() != priors.len() {
        return Err(Error::Shape(format!(
            "{} likelihoods for {} priors",
            log_likelihoods.len(),
            priors.len()
        )));
    }
    let joint: Vec<f64> = log_likelihoods
        .iter()
        .zip(priors)
        .map(|(l, p)| if *p > 0.0 { l + p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let norm = logsumexp(&joint);
    if !norm.is_finite() {
        return Err(Error::Numeric("no class has a finite joint likelihood".into()));
    }
    Ok(joint.into_iter().map(|j| j - norm).collect())
}

/// Bayes rule in log space from per-class log-likelihoods and priors.
pub fn posterior_from_log_likelihoods(log_likelihoods: &[f64], priors: &[f64]) -> Result<Vec<f64>> {
    Ok(posterior_log_space(log_likelihoods, priors)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Class frequencies `count_i / Σ counts`.
pub fn empirical_prior(class_counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::Parameter("class counts sum to zero; prior undefined".into()));
    }
    Ok(class_counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Fits one Gaussian per class from its concatenated tempered logit vectors.
///
/// Classes with fewer than `min_fit_samples` vectors are kept in the model
/// but flagged unfit.
pub fn fit_posterior_model(
    class_ids: &[ClassId],
    logit_samples: &[Vec<Vec<f64>>],
    class_counts: &[usize],
    epsilon: f64,
    min_fit_samples: usize,
) -> Result<PosteriorModel> {
    if class_ids.is_empty() {
        return Err(Error::Parameter("no classes to fit".into()));
    }
    if logit_samples.len() != class_ids.len() || class_counts.len() != class_ids.len() {
        return Err(Error::Shape(format!(
            "{} class ids, {} sample lists, {} counts",
            class_ids.len(),
            logit_samples.len(),
            class_counts.len()
        )));
    }
    let gaussians = class_ids
        .iter()
        .zip(logit_samples)
        .map(|(&id, samples)| estimate_class_stats(id, samples, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let unfit = logit_samples.iter().map(|s| s.len() < min_fit_samples.max(1)).collect();
    PosteriorModel::new(gaussians, empirical_prior(class_counts)?, unfit)
}

/// `p(d_i | z)` for every class of the model; sums to one.
pub fn bayes_posterior(model: &PosteriorModel, z: &[f64]) -> Result<Vec<f64>> {
    Ok(model.log_posterior(z)?.into_iter().map(f64::exp).collect())
}

/// The target block a sample is scored against, its class offset, and the
/// labelled class (largest target entry).
fn routed_block<'a>(k: usize, t: &'a TargetView, s: &LogitView, is_old: bool) -> Result<(&'a [f64], usize, usize)> {
    let n_old = s.old_block.len();
    let (block, offset) = if is_old {
        (&t.old_targets, 0)
    } else {
        (&t.new_targets, n_old)
    };
    if block.is_empty() {
        return Err(Error::Shape(format!(
            "sample {k} flagged {} but has no targets for that block",
            if is_old { "old" } else { "new" }
        )));
    }
    let expected = if is_old { n_old } else { s.new_block.len() };
    if block.len() != expected {
        return Err(Error::Shape(format!(
            "{} targets for a block of {} classes",
            block.len(),
            expected
        )));
    }
    let label = offset
        + block
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            )
            .0;
    Ok((block, offset, label))
}

/// Cross-entropy between label targets and the model's Bayes posterior,
/// averaged over the batch.
///
/// Old exemplars (`old_batch_flags[k] == true`) use their old-block targets,
/// which address classes `0..n_old`; new-class samples use their new-block
/// targets, which address classes `n_old..`. The posterior is evaluated on
/// the sample's own concatenated tempered logits, and the gradient reaches
/// the logits only through that point.
pub fn mutual_distillation_loss(
    model: &PosteriorModel,
    targets: &[TargetView],
    student_logits: &[LogitView],
    old_batch_flags: &[bool],
) -> Result<LossPart> {
    let batch = student_logits.len();
    if targets.len() != batch || old_batch_flags.len() != batch {
        return Err(Error::Shape(format!(
            "{} targets and {} flags for {} samples",
            targets.len(),
            old_batch_flags.len(),
            batch
        )));
    }
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let width = student_logits[0].width();
    if width != model.dim() || width != model.num_classes() {
        return Err(Error::Shape(format!(
            "{} logits against a model over {} classes in {} dimensions",
            width,
            model.num_classes(),
            model.dim()
        )));
    }
    let inv_b = 1.0 / batch as f64;
    let mut part = LossPart::zero(batch, width);
    for (k, ((t, s), &is_old)) in targets.iter().zip(student_logits).zip(old_batch_flags).enumerate() {
        if s.width() != width {
            return Err(Error::Shape("logit widths differ across the batch".into()));
        }
        let (block, offset, label) = routed_block(k, t, s, is_old)?;
        if !model.is_fit(label) {
            part.skipped += 1;
            continue;
        }

        let z = s.scaled();
        let log_post = model.log_posterior(&z)?;
        let mut loss = 0.0;
        let mut mass = 0.0;
        let mut grad_z = vec![0.0; width];
        for (m, &t_m) in block.iter().enumerate() {
            let class = offset + m;
            if t_m <= 0.0 || !model.is_fit(class) {
                continue;
            }
            loss -= t_m * log_post[class];
            mass += t_m;
            let g = model.gaussians[class].grad_logpdf(&z)?;
            for (gz, gi) in grad_z.iter_mut().zip(&g) {
                *gz -= t_m * gi;
            }
        }
        // d/dz log Σ_j π_j N_j(z) = Σ_j post_j ∇ log N_j(z)
        for (j, lp) in log_post.iter().enumerate() {
            if !model.is_fit(j) {
                continue;
            }
            let post = lp.exp();
            if post == 0.0 {
                continue;
            }
            let g = model.gaussians[j].grad_logpdf(&z)?;
            for (gz, gi) in grad_z.iter_mut().zip(&g) {
                *gz += mass * post * gi;
            }
        }
        part.value += inv_b * loss;
        let row = part.grad.row_mut(k);
        for (r, gz) in row.iter_mut().zip(&grad_z) {
            *r = inv_b * gz / s.tau;
        }
    }
    part.value = part.value.max(0.0);
    Ok(part)
}

/// Mutual-distillation loss with the class statistics differentiated too.
///
/// Each class Gaussian is fitted from `fixed[i]` (buffered logit vectors
/// outside this batch) together with the batch's own tempered logits of that
/// class, and the gradient flows through the means and covariances as well
/// as through the evaluation points. Priors stay constant.
#[allow(clippy::too_many_arguments)]
pub fn mutual_distillation_loss_live(
    class_ids: &[ClassId],
    fixed: &[Vec<Vec<f64>>],
    class_counts: &[usize],
    epsilon: f64,
    min_fit_samples: usize,
    targets: &[TargetView],
    student_logits: &[LogitView],
    old_batch_flags: &[bool],
    labels: &[usize],
) -> Result<LossPart> {
    let batch = student_logits.len();
    if labels.len() != batch || targets.len() != batch || old_batch_flags.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels, {} targets and {} flags for {} samples",
            labels.len(),
            targets.len(),
            old_batch_flags.len(),
            batch
        )));
    }
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if fixed.len() != class_ids.len() {
        return Err(Error::Shape(format!(
            "{} buffered sample lists for {} classes",
            fixed.len(),
            class_ids.len()
        )));
    }
    let k_classes = class_ids.len();
    if let Some(&l) = labels.iter().find(|&&l| l >= k_classes) {
        return Err(Error::Shape(format!("label {l} outside {k_classes} classes")));
    }
    let z: Vec<Vec<f64>> = student_logits.iter().map(LogitView::scaled).collect();
    let mut members = fixed.to_vec();
    for (zk, &l) in z.iter().zip(labels) {
        members[l].push(zk.clone());
    }
    let model = fit_posterior_model(class_ids, &members, class_counts, epsilon, min_fit_samples)?;
    let mut part = mutual_distillation_loss(&model, targets, student_logits, old_batch_flags)?;

    // Accumulate dL/dμ_j and dL/dΣ_j over every scored sample.
    let dim = model.dim();
    let inv_b = 1.0 / batch as f64;
    let precisions: Vec<Option<DenseMatrix>> = (0..k_classes)
        .map(|j| model.is_fit(j).then(|| model.gaussians[j].precision()))
        .collect();
    let mut g_mu = vec![vec![0.0; dim]; k_classes];
    let mut g_sigma = vec![DenseMatrix::zeros(dim, dim); k_classes];
    for (k, ((t, s), &is_old)) in targets.iter().zip(student_logits).zip(old_batch_flags).enumerate() {
        let (block, offset, label) = routed_block(k, t, s, is_old)?;
        if !model.is_fit(label) {
            continue;
        }
        let log_post = model.log_posterior(&z[k])?;
        let mass: f64 = block
            .iter()
            .enumerate()
            .filter(|&(m, &t_m)| t_m > 0.0 && model.is_fit(offset + m))
            .map(|(_, t_m)| t_m)
            .sum();
        for j in 0..k_classes {
            let Some(prec) = &precisions[j] else { continue };
            let mut c = mass * log_post[j].exp();
            if j >= offset && j < offset + block.len() && block[j - offset] > 0.0 {
                c -= block[j - offset];
            }
            if c == 0.0 {
                continue;
            }
            let c = c * inv_b;
            // dℓ/dμ = Σ⁻¹ r,  dℓ/dΣ = ½ (Σ⁻¹ r rᵀ Σ⁻¹ − Σ⁻¹)
            let r: Vec<f64> = z[k].iter().zip(model.gaussians[j].mean()).map(|(a, b)| a - b).collect();
            let pr = prec.matvec(&r)?;
            for a in 0..dim {
                g_mu[j][a] += c * pr[a];
                for b in 0..dim {
                    let v = g_sigma[j].get(a, b) + 0.5 * c * (pr[a] * pr[b] - prec.get(a, b));
                    g_sigma[j].set(a, b, v);
                }
            }
        }
    }

    // Chain through the estimators to the batch's own logit vectors.
    for (k, &l) in labels.iter().enumerate() {
        if precisions[l].is_none() {
            continue;
        }
        let g = &model.gaussians[l];
        let n = g.sample_count();
        let mut dz = g_mu[l].iter().map(|v| v / n as f64).collect::<Vec<_>>();
        if n > 1 {
            let scale = 2.0 / (n - 1) as f64;
            let r: Vec<f64> = z[k].iter().zip(g.mean()).map(|(a, b)| a - b).collect();
            if g.is_diagonal_fit() {
                for a in 0..dim {
                    dz[a] += scale * g_sigma[l].get(a, a) * r[a];
                }
            } else {
                let gr = g_sigma[l].matvec(&r)?;
                for a in 0..dim {
                    dz[a] += scale * gr[a];
                }
            }
        }
        let tau = student_logits[k].tau;
        let row = part.grad.row_mut(k);
        for (out, d) in row.iter_mut().zip(&dz) {
            *out += d / tau;
        }
    }
    Ok(part)
}
