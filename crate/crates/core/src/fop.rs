//! Fisher-orthogonal projection.
//!
//! Given two gradients with mean `g_avg` and difference `g_diff`, remove the
//! component of `g_diff` along `g_avg` under a metric `M ≈ F`, then re-inject
//! the residual scaled by a mixing coefficient `β`:
//!
//! ```text
//! s      = ⟨g_diff, M g_avg⟩ / (⟨g_avg, M g_avg⟩ + ε)
//! r      = g_diff − s·g_avg
//! g_comb = g_avg + β·r
//! ```
//!
//! The metric is read from the factor state *before* the current step's factor
//! update, and falls back to the identity while the factors are still empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::oracle::DenseFisher;
use crate::preconditioners::FactorState;

/// A symmetric positive (semi)definite linear operator on parameter matrices.
pub trait Metric {
    fn apply(&self, v: &Matrix) -> Result<Matrix>;
}

/// The Euclidean metric.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityMetric;

impl Metric for IdentityMetric {
    fn apply(&self, v: &Matrix) -> Result<Matrix> {
        Ok(v.clone())
    }
}

impl Metric for FactorState {
    fn apply(&self, v: &Matrix) -> Result<Matrix> {
        metric_apply(self, v)
    }
}

impl<M: Metric + ?Sized> Metric for &M {
    fn apply(&self, v: &Matrix) -> Result<Matrix> {
        (**self).apply(v)
    }
}

/// Forward metric proxy `M(V) = L·V·R`, or `V` before the first factor update.
pub fn metric_apply(state: &FactorState, v: &Matrix) -> Result<Matrix> {
    v.ensure_shape("metric_apply", state.param_shape())?;
    if state.step == 0 {
        return Ok(v.clone());
    }
    Ok(state.left.matmul_unchecked(v).matmul_unchecked(&state.right))
}

/// How the mixing coefficient `β` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaPolicy {
    /// `β = beta_value`.
    Fixed,
    /// `β = κ·‖g_avg‖_M / (‖r‖_M + ε)`.
    Normalized,
    /// Minimizer of the second modality's quadratic surrogate under a dense
    /// Fisher. Test use only.
    OptimalOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FopSettings {
    pub beta_policy: BetaPolicy,
    pub beta_value: f64,
    pub kappa: f64,
    pub eps: f64,
    pub beta_clip: f64,
}

impl Default for FopSettings {
    fn default() -> Self {
        Self {
            beta_policy: BetaPolicy::Normalized,
            beta_value: 0.0,
            kappa: 1.0,
            eps: 1e-12,
            beta_clip: 10.0,
        }
    }
}

impl FopSettings {
    pub fn fixed(beta: f64) -> Self {
        Self {
            beta_policy: BetaPolicy::Fixed,
            beta_value: beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(alloc::format!(
                "fop eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.beta_clip > 0.0) {
            return Err(Error::Config(alloc::format!(
                "beta_clip must be positive, got {}",
                self.beta_clip
            )));
        }
        if self.beta_policy == BetaPolicy::Normalized && !(self.kappa > 0.0) {
            return Err(Error::Config(alloc::format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !self.beta_value.is_finite() {
            return Err(Error::Config("beta_value must be finite".into()));
        }
        Ok(())
    }
}

/// Mean and difference of two gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub g_avg: Matrix,
    pub g_diff: Matrix,
}

impl GradientPair {
    pub fn new(g_avg: Matrix, g_diff: Matrix) -> Result<Self> {
        g_diff.ensure_shape("GradientPair", g_avg.shape())?;
        if !g_avg.is_finite() || !g_diff.is_finite() {
            return Err(Error::Validation("gradient pair contains non-finite entries".into()));
        }
        Ok(Self { g_avg, g_diff })
    }

    /// `g_avg = ½(g₁ + g₂)`, `g_diff = g₁ − g₂`.
    pub fn from_gradients(g1: &Matrix, g2: &Matrix) -> Result<Self> {
        let g_avg = g1.add(g2)?.scale(0.5);
        let g_diff = g1.sub(g2)?;
        Self::new(g_avg, g_diff)
    }
}

/// `s = ⟨g_diff, M g_avg⟩ / (⟨g_avg, M g_avg⟩ + ε)`.
pub fn projection_coefficient(pair: &GradientPair, metric: &dyn Metric, eps: f64) -> Result<f64> {
    let m_avg = metric.apply(&pair.g_avg)?;
    let denom = pair.g_avg.dot(&m_avg)? + eps;
    if !(denom > 0.0) {
        return Err(Error::Validation(alloc::format!(
            "projection denominator ⟨g_avg, M g_avg⟩ + eps = {denom} is not positive"
        )));
    }
    Ok(pair.g_diff.dot(&m_avg)? / denom)
}

/// Fisher-orthogonal residual `r = g_diff − s·g_avg`.
pub fn orthogonal_residual(pair: &GradientPair, metric: &dyn Metric, eps: f64) -> Result<Matrix> {
    let s = projection_coefficient(pair, metric, eps)?;
    let mut r = pair.g_diff.clone();
    r.axpy(-s, &pair.g_avg)?;
    Ok(r)
}

/// `β` for the given policy, clamped to `±beta_clip`.
///
/// `fisher` is only consulted by [`BetaPolicy::OptimalOracle`], where it is
/// required.
pub fn mixing_coefficient(
    pair: &GradientPair,
    residual: &Matrix,
    metric: &dyn Metric,
    settings: &FopSettings,
    fisher: Option<&DenseFisher>,
) -> Result<f64> {
    residual.ensure_shape("mixing_coefficient", pair.g_avg.shape())?;
    let raw = match settings.beta_policy {
        BetaPolicy::Fixed => settings.beta_value,
        BetaPolicy::Normalized => {
            let avg_norm = pair.g_avg.dot(&metric.apply(&pair.g_avg)?)?.max(0.0);
            let res_norm = residual.dot(&metric.apply(residual)?)?.max(0.0);
            settings.kappa * math::sqrt(avg_norm) / (math::sqrt(res_norm) + settings.eps)
        }
        BetaPolicy::OptimalOracle => {
            let fisher =
                fisher.ok_or_else(|| Error::Config("optimal_oracle beta policy needs a dense Fisher".into()))?;
            let f_inv_r = fisher.solve(&residual.vec())?;
            let num = crate::matrix::dot_slices(&pair.g_diff.vec(), &f_inv_r);
            let den = crate::matrix::dot_slices(&residual.vec(), &f_inv_r);
            if den > 0.0 {
                -0.5 * num / den
            } else {
                0.0
            }
        }
    };
    Ok(raw.clamp(-settings.beta_clip, settings.beta_clip))
}

/// `g_avg + β·r`.
pub fn combine(g_avg: &Matrix, residual: &Matrix, beta: f64) -> Result<Matrix> {
    let mut out = g_avg.clone();
    out.axpy(beta, residual)?;
    Ok(out)
}

/// Result of one full projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FopOutcome {
    pub combined: Matrix,
    pub residual: Matrix,
    pub beta: f64,
}

/// Residual, mixing and combination in one call.
pub fn fop_combine(
    pair: &GradientPair,
    metric: &dyn Metric,
    settings: &FopSettings,
    fisher: Option<&DenseFisher>,
) -> Result<FopOutcome> {
    let residual = orthogonal_residual(pair, metric, settings.eps)?;
    let beta = mixing_coefficient(pair, &residual, metric, settings, fisher)?;
    let combined = combine(&pair.g_avg, &residual, beta)?;
    Ok(FopOutcome {
        combined,
        residual,
        beta,
    })
}
