//! Per-parameter optimizer state: AdamW, Shampoo and SOAP.
//!
//! All three share the decoupled weight-decay step
//! `θ ← θ − lr·update − lr·weight_decay·θ`; they differ in how `update` is
//! produced from the gradient.
//!
//! * AdamW: `m̂/(√v̂ + ε)` elementwise.
//! * Shampoo: `L̂^{-1/4}·Ĝ·R̂^{-1/4}` where `L`, `R` are EMAs of `G·Gᵀ` and
//!   `Gᵀ·G` and `Ĝ` is the bias-corrected momentum of `G`.
//! * SOAP: Adam run on `qLᵀ·G·qR`, rotated back with `qL·(·)·qRᵀ`, where `qL`,
//!   `qR` are eigenbases of the same factors refreshed every
//!   `refresh_interval` steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;
use crate::numerics::{self, SymMatrix};

/// Scalar hyperparameters shared by every preconditioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// EMA decay of the Kronecker factors.
    pub factor_decay: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Relative damping of the inverse roots (Shampoo).
    pub damping: f64,
    /// SOAP eigenbasis refresh period, in steps.
    pub refresh_interval: u64,
    /// Rescale Shampoo/SOAP updates to the Frobenius norm of an AdamW update.
    pub grafting: bool,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            factor_decay: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            damping: numerics::DEFAULT_DAMPING,
            refresh_interval: 10,
            grafting: false,
        }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(alloc::format!("{name} must lie in [0, 1), got {x}")))
            }
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "lr must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        // factor_decay = 1 freezes the factors, which tests rely on.
        if !(0.0..=1.0).contains(&self.factor_decay) {
            return Err(Error::Config(alloc::format!(
                "factor_decay must lie in [0, 1], got {}",
                self.factor_decay
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(alloc::format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "damping must be nonnegative, got {}",
                self.damping
            )));
        }
        if self.refresh_interval == 0 {
            return Err(Error::Config("refresh_interval must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment EMAs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl AdamMoments {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    /// Folds `grad` into the moments and returns `m̂/(√v̂ + ε)`.
    pub fn advance(&mut self, grad: &Matrix, hyper: &OptimizerHyper) -> Result<Matrix> {
        grad.ensure_shape("AdamMoments::advance", self.m.shape())?;
        check_finite(grad)?;
        self.step += 1;
        let (b1, b2) = (hyper.beta1, hyper.beta2);
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(b1, f64::from(t));
        let bc2 = 1.0 - libm::pow(b2, f64::from(t));
        let mut out = Matrix::zeros(grad.rows(), grad.cols());
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (((mi, vi), &g), o) in m
            .iter_mut()
            .zip(v.iter_mut())
            .zip(grad.as_slice())
            .zip(out.as_mut_slice())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *o = m_hat / (math::sqrt(v_hat) + hyper.eps);
        }
        Ok(out)
    }

    /// Bias-corrected first moment after folding in `grad` (momentum only).
    pub fn advance_first(&mut self, grad: &Matrix, beta1: f64) -> Result<Matrix> {
        grad.ensure_shape("AdamMoments::advance_first", self.m.shape())?;
        check_finite(grad)?;
        self.step += 1;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        for (mi, &g) in self.m.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
        }
        Ok(self.m.scale(1.0 / bc1))
    }
}

fn check_finite(grad: &Matrix) -> Result<()> {
    match grad.first_non_finite() {
        Some((row, col, value)) => Err(Error::NonFinite {
            param: "<unnamed>".into(),
            row,
            col,
            value,
        }),
        None => Ok(()),
    }
}

/// Decoupled weight-decay step: `θ − lr·update − lr·weight_decay·θ`.
pub fn apply_update(param: &Matrix, update: &Matrix, hyper: &OptimizerHyper) -> Result<Matrix> {
    param.ensure_shape("apply_update", update.shape())?;
    let lr = hyper.lr;
    let wd = hyper.weight_decay;
    Ok(param.zip_map(update, |p, u| p - lr * u - lr * wd * p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamwOutput {
    pub update: Matrix,
    pub new_param: Matrix,
}

/// One AdamW step.
pub fn adamw_step(
    state: &mut AdamMoments,
    grad: &Matrix,
    hyper: &OptimizerHyper,
    param: &Matrix,
) -> Result<AdamwOutput> {
    param.ensure_shape("adamw_step", state.m.shape())?;
    let update = state.advance(grad, hyper)?;
    let new_param = apply_update(param, &update, hyper)?;
    Ok(AdamwOutput { update, new_param })
}

/// Kronecker curvature state for one `m × n` parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    /// EMA of `G·Gᵀ` (`m × m`).
    #[serde(rename = "L")]
    pub left: Matrix,
    /// EMA of `Gᵀ·G` (`n × n`).
    #[serde(rename = "R")]
    pub right: Matrix,
    #[serde(rename = "qL")]
    pub q_left: Matrix,
    #[serde(rename = "qR")]
    pub q_right: Matrix,
    /// Adam moments in the rotated coordinates (SOAP only).
    pub rotated_moments: Option<AdamMoments>,
    pub step: u64,
    pub refresh_interval: u64,
}

impl FactorState {
    pub fn new(rows: usize, cols: usize, refresh_interval: u64) -> Self {
        Self {
            left: Matrix::zeros(rows, rows),
            right: Matrix::zeros(cols, cols),
            q_left: Matrix::identity(rows),
            q_right: Matrix::identity(cols),
            rotated_moments: None,
            step: 0,
            refresh_interval: refresh_interval.max(1),
        }
    }

    /// State with rotated Adam moments, as used by SOAP.
    pub fn new_soap(rows: usize, cols: usize, refresh_interval: u64) -> Self {
        let mut s = Self::new(rows, cols, refresh_interval);
        s.rotated_moments = Some(AdamMoments::new(rows, cols));
        s
    }

    /// State seeded with given factors, as if `step` updates had happened.
    pub fn with_factors(left: SymMatrix, right: SymMatrix, step: u64, refresh_interval: u64) -> Self {
        let (m, n) = (left.dim(), right.dim());
        Self {
            left: left.into_matrix(),
            right: right.into_matrix(),
            q_left: Matrix::identity(m),
            q_right: Matrix::identity(n),
            rotated_moments: None,
            step,
            refresh_interval: refresh_interval.max(1),
        }
    }

    pub fn param_shape(&self) -> (usize, usize) {
        (self.left.rows(), self.right.rows())
    }

    pub fn left_factor(&self) -> SymMatrix {
        SymMatrix::from_matrix_unchecked(self.left.clone())
    }

    pub fn right_factor(&self) -> SymMatrix {
        SymMatrix::from_matrix_unchecked(self.right.clone())
    }

    /// Whether the eigenbases are recomputed at `step` (1, 1 + T, 1 + 2T, …).
    pub fn refresh_due(&self, step: u64) -> bool {
        step >= 1 && (step - 1) % self.refresh_interval == 0
    }

    /// Recomputes `qL`, `qR` from the current factors. Each new eigenvector
    /// takes the sign that agrees with its predecessor so that moments
    /// carried across the refresh keep their orientation.
    pub fn refresh_eigenbases(&mut self) -> Result<()> {
        let left = numerics::sym_eigh(&self.left_factor())?.eigenvectors;
        let right = numerics::sym_eigh(&self.right_factor())?.eigenvectors;
        self.q_left = align_signs(left, &self.q_left);
        self.q_right = align_signs(right, &self.q_right);
        Ok(())
    }

    /// `L ← decay·L + (1−decay)·G·Gᵀ`, `R ← decay·R + (1−decay)·Gᵀ·G`, then
    /// advances the step and refreshes the eigenbases when due.
    pub fn update_factors(&mut self, g: &Matrix, factor_decay: f64) -> Result<()> {
        g.ensure_shape("update_factors", self.param_shape())?;
        check_finite(g)?;
        ema_into(&mut self.left, &g.gram_left(), factor_decay);
        ema_into(&mut self.right, &g.gram_right(), factor_decay);
        self.step += 1;
        if self.refresh_due(self.step) {
            self.refresh_eigenbases()?;
        }
        Ok(())
    }
}

fn align_signs(mut q: Matrix, previous: &Matrix) -> Matrix {
    let n = q.rows();
    for j in 0..n {
        let agreement: f64 = (0..n).map(|i| q[(i, j)] * previous[(i, j)]).sum();
        if agreement < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

fn ema_into(acc: &mut Matrix, sample: &Matrix, decay: f64) {
    if decay == 1.0 {
        return;
    }
    for (a, &s) in acc.as_mut_slice().iter_mut().zip(sample.as_slice()) {
        *a = decay * *a + (1.0 - decay) * s;
    }
}

/// `L̂^{-1/4}·G·R̂^{-1/4}` from the current factors, each damped relative to
/// its own largest eigenvalue.
pub fn shampoo_precondition(state: &FactorState, g: &Matrix, damping: f64) -> Result<Matrix> {
    if state.step == 0 {
        return Err(Error::State(
            "shampoo_precondition called before any factor update".into(),
        ));
    }
    g.ensure_shape("shampoo_precondition", state.param_shape())?;
    let left_root = numerics::inverse_pth_root(&state.left_factor(), 4, damping)?;
    let right_root = numerics::inverse_pth_root(&state.right_factor(), 4, damping)?;
    numerics::kron_apply(&left_root, &right_root, g)
}

/// One SOAP step. Factors are updated with `G` first, then `G` is rotated into
/// the (possibly refreshed) eigenbasis and normalized by the rotated Adam
/// moments. Moments are carried across a refresh without re-projection.
pub fn soap_step(state: &mut FactorState, g: &Matrix, hyper: &OptimizerHyper) -> Result<Matrix> {
    let (rows, cols) = state.param_shape();
    if state.rotated_moments.is_none() {
        state.rotated_moments = Some(AdamMoments::new(rows, cols));
    }
    state.update_factors(g, hyper.factor_decay)?;
    let rotated = state.q_left.t_matmul_unchecked(g).matmul_unchecked(&state.q_right);
    let moments = state
        .rotated_moments
        .as_mut()
        .ok_or_else(|| Error::State("missing rotated moments".into()))?;
    let direction = moments.advance(&rotated, hyper)?;
    Ok(state
        .q_left
        .matmul_unchecked(&direction)
        .matmul_t_unchecked(&state.q_right))
}

/// Which preconditioner drives a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    Adamw,
    Shampoo,
    Soap,
}

/// Optimizer state of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamState {
    Adamw {
        moments: AdamMoments,
    },
    Shampoo {
        factors: FactorState,
        momentum: AdamMoments,
        graft: Option<AdamMoments>,
    },
    Soap {
        factors: FactorState,
        graft: Option<AdamMoments>,
    },
}

impl ParamState {
    pub fn new(kind: PreconditionerKind, rows: usize, cols: usize, hyper: &OptimizerHyper) -> Self {
        let graft = hyper.grafting.then(|| AdamMoments::new(rows, cols));
        match kind {
            PreconditionerKind::Adamw => ParamState::Adamw {
                moments: AdamMoments::new(rows, cols),
            },
            PreconditionerKind::Shampoo => ParamState::Shampoo {
                factors: FactorState::new(rows, cols, hyper.refresh_interval),
                momentum: AdamMoments::new(rows, cols),
                graft,
            },
            PreconditionerKind::Soap => ParamState::Soap {
                factors: FactorState::new_soap(rows, cols, hyper.refresh_interval),
                graft,
            },
        }
    }

    /// Kronecker factors, if the preconditioner keeps any.
    pub fn factors(&self) -> Option<&FactorState> {
        match self {
            ParamState::Adamw { .. } => None,
            ParamState::Shampoo { factors, .. } | ParamState::Soap { factors, .. } => Some(factors),
        }
    }

    /// Computes the update direction for `grad` and advances the state.
    pub fn update_direction(&mut self, grad: &Matrix, hyper: &OptimizerHyper) -> Result<Matrix> {
        match self {
            ParamState::Adamw { moments } => moments.advance(grad, hyper),
            ParamState::Shampoo {
                factors,
                momentum,
                graft,
            } => {
                factors.update_factors(grad, hyper.factor_decay)?;
                let smoothed = momentum.advance_first(grad, hyper.beta1)?;
                let update = shampoo_precondition(factors, &smoothed, hyper.damping)?;
                graft_norm(update, graft.as_mut(), grad, hyper)
            }
            ParamState::Soap { factors, graft } => {
                let update = soap_step(factors, grad, hyper)?;
                graft_norm(update, graft.as_mut(), grad, hyper)
            }
        }
    }

    /// Full step on `param` (in place).
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix, hyper: &OptimizerHyper) -> Result<()> {
        let update = self.update_direction(grad, hyper)?;
        *param = apply_update(param, &update, hyper)?;
        Ok(())
    }
}

fn graft_norm(
    update: Matrix,
    graft: Option<&mut AdamMoments>,
    grad: &Matrix,
    hyper: &OptimizerHyper,
) -> Result<Matrix> {
    let Some(graft) = graft else {
        return Ok(update);
    };
    let reference = graft.advance(grad, hyper)?;
    let norm = update.frobenius_norm();
    if norm == 0.0 {
        return Ok(update);
    }
    Ok(update.scale(reference.frobenius_norm() / norm))
}
