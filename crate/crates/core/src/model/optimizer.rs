//! ADADELTA (Zeiler, 2012).

use serde::{Deserialize, Serialize};

use super::{Classifier, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-6 }
    }
}

/// Running averages of squared gradients and squared updates, one entry per
/// classifier parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: ParamSet,
    pub sq_update: ParamSet,
}

impl OptimizerState {
    pub fn new(model: &Classifier, config: AdadeltaConfig) -> Result<Self> {
        if !(config.rho > 0.0 && config.rho < 1.0) {
            return Err(Error::Parameter(format!("rho must be in (0, 1), got {}", config.rho)));
        }
        if !(config.eps > 0.0 && config.eps.is_finite()) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", config.eps)));
        }
        let zeros = model.params().zeros_like();
        Ok(Self {
            rho: config.rho,
            eps: config.eps,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        })
    }

    /// Extends the accumulators after the classifier grew its head.
    pub fn grow_head(&mut self, k_new: usize) {
        self.sq_grad.grow_head(k_new);
        self.sq_update.grow_head(k_new);
    }
}

/// One ADADELTA update:
///
/// ```text
/// E[g²]  ← ρ E[g²] + (1-ρ) g²
/// Δ      = -(√(E[Δ²] + ε) / √(E[g²] + ε)) g
/// E[Δ²]  ← ρ E[Δ²] + (1-ρ) Δ²
/// θ      ← θ + Δ
/// ```
///
/// Nothing is modified if any gradient entry is non-finite.
pub fn adadelta_step(model: &mut Classifier, grads: &ParamSet, state: &mut OptimizerState) -> Result<()> {
    if !grads.same_shape(model.params()) || !state.sq_grad.same_shape(model.params()) {
        return Err(Error::Shape(
            "gradients, optimizer state and parameters differ in shape".into(),
        ));
    }
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient; update skipped".into()));
    }
    let (rho, eps) = (state.rho, state.eps);
    let params = model.params_mut();
    for (((p, g), eg), ed) in params
        .values_mut()
        .zip(grads.values())
        .zip(state.sq_grad.values_mut())
        .zip(state.sq_update.values_mut())
    {
        *eg = rho * *eg + (1.0 - rho) * g * g;
        let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
        *ed = rho * *ed + (1.0 - rho) * delta * delta;
        *p += delta;
    }
    Ok(())
}
