//! The training loop.
//!
//! Each optimizer step draws `K = global_batch / micro_batch` micro-batches in
//! stream order, turns their gradients into one step gradient (mean, half-split
//! projection or dyadic folding), and hands it to the per-parameter
//! preconditioner. The logged losses are the task's exact expected losses at
//! the parameters after the step, so curves are free of sampling noise.

use std::time::Instant;

use modprec_core::fop::{fop_combine, Metric};
use modprec_core::preconditioners::ParamState;
use modprec_core::tasks::{LossGrad, Modality};
use modprec_core::{Error as CoreError, FoldConfig, FoldState, GradientPair, IdentityMetric, Matrix, Task};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{Accumulation, RunConfig};
use crate::error::{HarnessError, Result};
use crate::record::{RunRecord, StepRow};
use crate::schedule::lr_at;
use crate::threads;

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Streaming per-modality sum of coordinate variances (Welford).
#[derive(Clone, Debug, Default)]
pub(crate) struct TraceAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: f64,
}

impl TraceAccumulator {
    pub(crate) fn push(&mut self, grads: &[Matrix]) {
        let len: usize = grads.iter().map(Matrix::len).sum();
        if self.mean.len() != len {
            self.mean = vec![0.0; len];
        }
        if self.count == 0 {
            self.mean.iter_mut().for_each(|m| *m = 0.0);
            self.m2 = 0.0;
        }
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        let values = grads.iter().flat_map(|g| g.as_slice().iter());
        for (m, &x) in self.mean.iter_mut().zip(values) {
            let delta = x - *m;
            *m += delta * inv;
            self.m2 += delta * (x - *m);
        }
    }

    /// Unbiased trace estimate; `None` with fewer than two samples.
    pub(crate) fn trace(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    pub(crate) fn reset(&mut self) {
        self.count = 0;
    }
}

enum Combiner {
    Mean(Vec<Matrix>),
    Halves(Vec<Matrix>, Vec<Matrix>),
    Folded(Vec<FoldState>),
}

/// Training state of one run; can be checkpointed between steps.
pub struct Trainer {
    config: RunConfig,
    task: Task,
    fold: Option<FoldConfig>,
    params: Vec<Matrix>,
    states: Vec<ParamState>,
    step: u64,
    rows: Vec<StepRow>,
    traces: (f64, f64),
    diverged: bool,
    reproducible: bool,
    parallel_params: bool,
    wall_ms: f64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let task = Task::new(config.task_spec())?;
        let params = task.initial_params();
        let states = params
            .iter()
            .map(|p| ParamState::new(config.optimizer.preconditioner(), p.rows(), p.cols(), &config.hyper))
            .collect();
        let mut trainer = Self::assemble(config, task, params, states)?;
        let initial = trainer.row_for(0, 0.0, (0.0, 0.0, 0.0), 0.0)?;
        trainer.rows.push(initial);
        Ok(trainer)
    }

    fn assemble(config: RunConfig, task: Task, params: Vec<Matrix>, states: Vec<ParamState>) -> Result<Self> {
        let fold = match config.optimizer.accumulation() {
            Accumulation::Folded => Some(config.fold_config()?),
            _ => None,
        };
        let threads = threads::configured()?;
        Ok(Self {
            config,
            task,
            fold,
            params,
            states,
            step: 0,
            rows: Vec::new(),
            traces: (0.0, 0.0),
            diverged: false,
            reproducible: threads == Some(1),
            parallel_params: threads != Some(1),
            wall_ms: 0.0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.check_version()?;
        ckpt.config.validate()?;
        let task = Task::new(ckpt.config.task_spec())?;
        let shapes = task.param_shapes();
        if ckpt.params.len() != shapes.len()
            || ckpt.states.len() != shapes.len()
            || ckpt.params.iter().zip(&shapes).any(|(p, (_, s))| p.shape() != *s)
        {
            return Err(HarnessError::Checkpoint(
                "parameter shapes do not match the configured task".into(),
            ));
        }
        let mut trainer = Self::assemble(ckpt.config, task, ckpt.params, ckpt.states)?;
        trainer.step = ckpt.step;
        trainer.rows = ckpt.rows;
        trainer.traces = ckpt.traces;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        if self.diverged {
            return Err(HarnessError::Checkpoint("cannot checkpoint a diverged run".into()));
        }
        Ok(Checkpoint::new(
            self.config.clone(),
            self.step,
            self.params.clone(),
            self.states.clone(),
            self.traces,
            self.rows.clone(),
        ))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn states(&self) -> &[ParamState] {
        &self.states
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rows(&self) -> &[StepRow] {
        &self.rows
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn is_finished(&self) -> bool {
        self.diverged || self.step >= self.config.total_steps
    }

    fn row_for(&self, step: u64, lr: f64, betas: (f64, f64, f64), wall_ms: f64) -> Result<StepRow> {
        let pop = self.task.population_loss(&self.params)?;
        let k = self.config.accumulation_steps();
        Ok(StepRow {
            step,
            tokens_or_samples: step * k as u64 * self.task.units_per_micro_batch(self.config.micro_batch),
            lr,
            loss_total: pop.total,
            loss_image: pop.image,
            loss_text: pop.text,
            tr_img: self.traces.0,
            tr_text: self.traces.1,
            beta_min: betas.0,
            beta_mean: betas.1,
            beta_max: betas.2,
            wall_ms,
        })
    }

    fn metric(&self, index: usize) -> &dyn Metric {
        match self.states[index].factors() {
            Some(f) => f,
            None => &IdentityMetric,
        }
    }

    /// Runs one optimizer step. Returns `false` once the run has finished or
    /// diverged.
    pub fn step_once(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let started = Instant::now();
        let step = self.step + 1;
        let k = self.config.accumulation_steps();
        let n = self.params.len();
        let zeros = || {
            self.params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        let mut combiner = match self.config.optimizer.accumulation() {
            Accumulation::Mean => Combiner::Mean(zeros()),
            Accumulation::HalfSplit => Combiner::Halves(zeros(), zeros()),
            Accumulation::Folded => Combiner::Folded(
                (0..n)
                    .map(|_| FoldState::new(k).map_err(HarnessError::from))
                    .collect::<Result<_>>()?,
            ),
        };
        let mut traces = (TraceAccumulator::default(), TraceAccumulator::default());
        let mut train_loss = 0.0;

        for micro in 0..k {
            let index = (step - 1) * k as u64 + micro as u64;
            let batch = self.task.sample_micro_batch(index, self.config.micro_batch);
            let LossGrad { loss, grads, .. } = match self.task.loss_and_grad(&self.params, &batch) {
                Ok(out) => out,
                Err(e) if is_divergence(&e) => return self.mark_diverged(),
                Err(e) => return Err(e.into()),
            };
            if !grads.iter().all(Matrix::is_finite) {
                return self.mark_diverged();
            }
            train_loss += loss / k as f64;
            match batch.modality {
                Modality::Image => traces.0.push(&grads),
                Modality::Text => traces.1.push(&grads),
                Modality::Mixed => {}
            }
            match &mut combiner {
                Combiner::Mean(sums) => {
                    for (s, g) in sums.iter_mut().zip(&grads) {
                        s.axpy(1.0, g)?;
                    }
                }
                Combiner::Halves(first, second) => {
                    let target = if micro < k / 2 { first } else { second };
                    for (s, g) in target.iter_mut().zip(&grads) {
                        s.axpy(1.0, g)?;
                    }
                }
                Combiner::Folded(folds) => {
                    let cfg = self.fold.as_ref().expect("folded optimizers carry a fold config");
                    for (i, (fs, g)) in folds.iter_mut().zip(&grads).enumerate() {
                        let metric = match self.states[i].factors() {
                            Some(f) => f as &dyn Metric,
                            None => &IdentityMetric,
                        };
                        fs.accumulate_micro(g, metric, cfg)?;
                    }
                }
            }
        }
        if !(train_loss.is_finite() && train_loss <= DIVERGENCE_LOSS) {
            return self.mark_diverged();
        }

        let mut betas = Vec::new();
        let step_grads: Vec<Matrix> = match combiner {
            Combiner::Mean(sums) => sums.into_iter().map(|s| s.scale(1.0 / k as f64)).collect(),
            Combiner::Halves(first, second) => {
                let half = (k / 2) as f64;
                let mut out = Vec::with_capacity(n);
                for (i, (a, b)) in first.iter().zip(&second).enumerate() {
                    let pair = GradientPair::from_gradients(&a.scale(1.0 / half), &b.scale(1.0 / half))?;
                    let res = fop_combine(&pair, self.metric(i), &self.config.fop, None)?;
                    betas.push(res.beta);
                    out.push(res.combined);
                }
                out
            }
            Combiner::Folded(folds) => {
                let mut out = Vec::with_capacity(n);
                for fs in &folds {
                    betas.extend_from_slice(&fs.betas);
                    out.push(fs.finalize()?);
                }
                out
            }
        };

        let lr = lr_at(
            step,
            self.config.total_steps,
            self.config.peak_lr(),
            self.config.warmup_ratio,
            self.config.lr_floor,
        );
        let hyper = modprec_core::OptimizerHyper {
            lr,
            ..self.config.hyper.clone()
        };
        let outcome: std::result::Result<(), CoreError> = if self.parallel_params && n > 1 {
            self.params
                .par_iter_mut()
                .zip(self.states.par_iter_mut())
                .zip(step_grads.par_iter())
                .try_for_each(|((p, s), g)| s.step(p, g, &hyper))
        } else {
            self.params
                .iter_mut()
                .zip(self.states.iter_mut())
                .zip(&step_grads)
                .try_for_each(|((p, s), g)| s.step(p, g, &hyper))
        };
        match outcome {
            Ok(()) => {}
            Err(e) if is_divergence(&e) => return self.mark_diverged(),
            Err(e) => return Err(e.into()),
        }
        if !self.params.iter().all(Matrix::is_finite) {
            return self.mark_diverged();
        }

        if let Some(t) = traces.0.trace() {
            self.traces.0 = t;
        }
        if let Some(t) = traces.1.trace() {
            self.traces.1 = t;
        }
        traces.0.reset();
        traces.1.reset();
        let beta_stats = if betas.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                betas.iter().copied().fold(f64::INFINITY, f64::min),
                betas.iter().sum::<f64>() / betas.len() as f64,
                betas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        self.wall_ms += elapsed;
        let wall = if self.reproducible { 0.0 } else { elapsed };
        let row = self.row_for(step, lr, beta_stats, wall)?;
        if !(row.is_finite() && row.loss_total <= DIVERGENCE_LOSS) {
            return self.mark_diverged();
        }
        self.rows.push(row);
        self.step = step;
        Ok(!self.is_finished())
    }

    fn mark_diverged(&mut self) -> Result<bool> {
        self.diverged = true;
        Ok(false)
    }

    /// Steps until `step` (or the end of the run).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.step < step && self.step_once()? {}
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunRecord> {
        while self.step_once()? {}
        Ok(self.into_record())
    }

    pub fn into_record(self) -> RunRecord {
        RunRecord {
            config: self.config,
            rows: self.rows,
            diverged: self.diverged,
            wall_ms: self.wall_ms,
        }
    }
}

fn is_divergence(e: &CoreError) -> bool {
    matches!(e, CoreError::NonFinite { .. } | CoreError::Task(_))
}

pub fn run_training(config: RunConfig) -> Result<RunRecord> {
    Trainer::new(config)?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use modprec_core::tasks::covariance_trace_estimate;

    #[test]
    fn streaming_trace_matches_batch_estimate() {
        let gs: Vec<Matrix> = (0..7)
            .map(|i| Matrix::from_fn(2, 3, |r, c| ((i * 7 + r * 3 + c) as f64).sin()))
            .collect();
        let mut acc = TraceAccumulator::default();
        for g in &gs {
            acc.push(std::slice::from_ref(g));
        }
        let groups: Vec<(Modality, &Matrix)> = gs
            .iter()
            .flat_map(|g| [(Modality::Image, g), (Modality::Text, g)])
            .collect();
        let (want, _) = covariance_trace_estimate(&groups).unwrap();
        assert!((acc.trace().unwrap() - want).abs() < 1e-12);
        acc.reset();
        assert_eq!(acc.trace(), None);
    }
}
