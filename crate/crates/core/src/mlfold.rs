//! Multi-level hierarchical gradient folding over one accumulation window.
//!
//! Micro-gradients `g₁ … g_K` (K a power of two) arrive in order. The state
//! keeps three parameter-sized buffers regardless of K:
//!
//! * the running mean `ḡ_{1:k}`,
//! * the snapshot of that mean at the last dyadic boundary,
//! * the folded vector `z`.
//!
//! At every boundary `k ∈ {2, 4, …, K}` the mean of the newest segment is
//! recovered from the two cumulative means and folded into `z` with a
//! Fisher-orthogonal correction. The window therefore performs exactly
//! `log₂ K` folds.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fop::{self, FopSettings, GradientPair, Metric};
use crate::math;
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldConfig {
    pub window_size: usize,
    pub fop: FopSettings,
    /// Per-level decay `γ` applied as `β·γ^level`.
    pub level_decay: f64,
}

impl FoldConfig {
    pub fn new(window_size: usize, fop: FopSettings) -> Result<Self> {
        let cfg = Self {
            window_size,
            fop,
            level_decay: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || !self.window_size.is_power_of_two() {
            return Err(Error::Config(alloc::format!(
                "fold window size must be a power of two, got {}",
                self.window_size
            )));
        }
        if !(self.level_decay > 0.0 && self.level_decay <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "level_decay must lie in (0, 1], got {}",
                self.level_decay
            )));
        }
        self.fop.validate()
    }

    pub fn levels(&self) -> u32 {
        self.window_size.trailing_zeros()
    }
}

/// `(count, mean)` at the most recent dyadic boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub count: usize,
    pub mean: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldState {
    pub micro_count: usize,
    pub window_size: usize,
    pub cum_mean: Option<Matrix>,
    pub prev_snapshot: Snapshot,
    pub z: Option<Matrix>,
    /// Index of the last completed fold (`log₂` of its boundary).
    pub level: u32,
    /// `β` used by each fold in this window.
    pub betas: Vec<f64>,
}

impl FoldState {
    pub fn new(window_size: usize) -> Result<Self> {
        if window_size == 0 || !window_size.is_power_of_two() {
            return Err(Error::Config(alloc::format!(
                "fold window size must be a power of two, got {window_size}"
            )));
        }
        Ok(Self {
            micro_count: 0,
            window_size,
            cum_mean: None,
            prev_snapshot: Snapshot { count: 0, mean: None },
            z: None,
            level: 0,
            betas: Vec::new(),
        })
    }

    /// Starts a new window, keeping the buffers allocated.
    pub fn reset(&mut self) {
        self.micro_count = 0;
        self.prev_snapshot.count = 0;
        self.level = 0;
        self.betas.clear();
    }

    /// Number of parameter-sized buffers currently held.
    pub fn persistent_buffers(&self) -> usize {
        usize::from(self.cum_mean.is_some())
            + usize::from(self.prev_snapshot.mean.is_some())
            + usize::from(self.z.is_some())
    }

    pub fn folds_done(&self) -> usize {
        self.betas.len()
    }

    pub fn is_complete(&self) -> bool {
        self.micro_count == self.window_size
    }

    /// Adds the next micro-gradient. `metric` must be the same (frozen)
    /// geometry for every call within a window.
    pub fn accumulate_micro(&mut self, g: &Matrix, metric: &dyn Metric, config: &FoldConfig) -> Result<()> {
        if config.window_size != self.window_size {
            return Err(Error::Config(alloc::format!(
                "fold config window {} does not match state window {}",
                config.window_size,
                self.window_size
            )));
        }
        if self.micro_count >= self.window_size {
            return Err(Error::State(alloc::format!(
                "window of {} micro-batches is already full",
                self.window_size
            )));
        }
        let k = self.micro_count + 1;
        if k == 1 {
            copy_into(&mut self.cum_mean, g);
            copy_into(&mut self.z, g);
            copy_into(&mut self.prev_snapshot.mean, g);
            self.prev_snapshot.count = 1;
            self.micro_count = 1;
            return Ok(());
        }

        let cum = self
            .cum_mean
            .as_mut()
            .ok_or_else(|| Error::State("missing cumulative mean".into()))?;
        g.ensure_shape("accumulate_micro", cum.shape())?;
        let inv_k = 1.0 / k as f64;
        for (c, &x) in cum.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *c += (x - *c) * inv_k;
        }
        self.micro_count = k;

        if k == 2 * self.prev_snapshot.count {
            let n1 = self.prev_snapshot.count;
            let prev_mean = self
                .prev_snapshot
                .mean
                .as_ref()
                .ok_or_else(|| Error::State("missing snapshot".into()))?;
            let segment = reconstruct_segment((n1, prev_mean), (k, cum))?;
            let level = k.trailing_zeros();
            let z_prev = self
                .z
                .as_ref()
                .ok_or_else(|| Error::State("missing folded vector".into()))?;
            let out = fold(
                z_prev,
                &segment,
                (n1, k - n1),
                metric,
                &config.fop,
                config.level_decay,
                level,
            )?;
            self.z = Some(out.z);
            self.betas.push(out.beta);
            self.level = level;
            let cum = self.cum_mean.as_ref().expect("checked above");
            copy_into(&mut self.prev_snapshot.mean, cum);
            self.prev_snapshot.count = k;
        }
        Ok(())
    }

    /// The folded direction `z_L`; only valid once the window is full.
    pub fn finalize(&self) -> Result<Matrix> {
        if !self.is_complete() {
            return Err(Error::State(alloc::format!(
                "finalize after {} of {} micro-batches",
                self.micro_count,
                self.window_size
            )));
        }
        self.z
            .clone()
            .ok_or_else(|| Error::State("missing folded vector".into()))
    }
}

fn copy_into(slot: &mut Option<Matrix>, src: &Matrix) {
    match slot {
        Some(buf) if buf.shape() == src.shape() => buf.as_mut_slice().copy_from_slice(src.as_slice()),
        _ => *slot = Some(src.clone()),
    }
}

/// Mean of micro-gradients `n₁+1 … n₂` from the cumulative means at `n₁`
/// and `n₂`: `(n₂·μ₂ − n₁·μ₁)/(n₂ − n₁)`.
pub fn reconstruct_segment(prev: (usize, &Matrix), curr: (usize, &Matrix)) -> Result<Matrix> {
    let (n1, mu1) = prev;
    let (n2, mu2) = curr;
    if n2 <= n1 {
        return Err(Error::Validation(alloc::format!(
            "segment needs n2 > n1, got n1 = {n1}, n2 = {n2}"
        )));
    }
    mu1.ensure_shape("reconstruct_segment", mu2.shape())?;
    if n1 == 0 {
        return Ok(mu2.clone());
    }
    let (a, b, span) = (n2 as f64, n1 as f64, (n2 - n1) as f64);
    Ok(mu2.zip_map(mu1, |x2, x1| (a * x2 - b * x1) / span))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldOutcome {
    pub z: Matrix,
    pub beta: f64,
}

/// One fold: count-weighted mean of `z_prev` and `segment`, corrected by the
/// Fisher-orthogonal part of their difference.
pub fn fold(
    z_prev: &Matrix,
    segment: &Matrix,
    counts: (usize, usize),
    metric: &dyn Metric,
    settings: &FopSettings,
    level_decay: f64,
    level: u32,
) -> Result<FoldOutcome> {
    let (n1, n2) = counts;
    if n1 == 0 || n2 == 0 {
        return Err(Error::Validation(alloc::format!(
            "fold counts must be positive, got ({n1}, {n2})"
        )));
    }
    segment.ensure_shape("fold", z_prev.shape())?;
    let (w1, w2) = (n1 as f64, n2 as f64);
    let total = w1 + w2;
    let avg = z_prev.zip_map(segment, |a, b| (w1 * a + w2 * b) / total);
    let diff = z_prev.sub(segment)?;
    let pair = GradientPair::new(avg, diff)?;
    let residual = fop::orthogonal_residual(&pair, metric, settings.eps)?;
    let beta =
        fop::mixing_coefficient(&pair, &residual, metric, settings, None)? * math::powf(level_decay, f64::from(level));
    let z = fop::combine(&pair.g_avg, &residual, beta)?;
    Ok(FoldOutcome { z, beta })
}
