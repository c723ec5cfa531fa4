//! Learning-rate grid search.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::record::RunRecord;
use crate::threads;
use crate::train::run_training;

/// Half-decade grid.
pub const DEFAULT_GRID: [f64; 6] = [0.1, 0.0316, 0.01, 0.00316, 0.001, 0.000316];

/// `"default"` or a comma-separated list of learning rates.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    if spec.trim() == "default" {
        return Ok(DEFAULT_GRID.to_vec());
    }
    let grid = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| HarnessError::Config(format!("invalid learning rate {s:?} in grid")))
        })
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(HarnessError::Config("empty grid".into()));
    }
    Ok(grid)
}

#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub lr: f64,
    /// `None` for diverged runs.
    pub smoothed_loss: Option<f64>,
    pub record: RunRecord,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub best_lr: f64,
    /// One entry per distinct grid value, in descending LR order.
    pub entries: Vec<SweepEntry>,
}

impl SweepResult {
    pub fn best(&self) -> &SweepEntry {
        self.entries
            .iter()
            .find(|e| e.lr == self.best_lr)
            .expect("best LR comes from the entries")
    }
}

/// Runs every grid LR with the config's seed and picks the lowest smoothed
/// final loss. Ties go to the smaller LR, so the result does not depend on
/// grid order.
pub fn grid_search(config: &RunConfig, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(HarnessError::Config("empty grid".into()));
    }
    config.validate()?;
    let mut lrs = grid.to_vec();
    lrs.sort_by(|a, b| b.total_cmp(a));
    lrs.dedup();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads::worker_count()?)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let records: Vec<Result<RunRecord>> = pool.install(|| {
        lrs.par_iter()
            .map(|&lr| {
                run_training(RunConfig {
                    base_lr: lr,
                    ..config.clone()
                })
            })
            .collect()
    });
    let mut entries = Vec::with_capacity(lrs.len());
    for (lr, record) in lrs.iter().zip(records) {
        let record = record?;
        entries.push(SweepEntry {
            lr: *lr,
            smoothed_loss: record.smoothed_loss(),
            record,
        });
    }
    let best = entries
        .iter()
        .filter_map(|e| e.smoothed_loss.map(|l| (l, e.lr)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .ok_or(HarnessError::AllDiverged)?;
    Ok(SweepResult {
        best_lr: best.1,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("default").unwrap(), DEFAULT_GRID.to_vec());
        assert_eq!(parse_grid("0.1, 0.01").unwrap(), vec![0.1, 0.01]);
        assert!(parse_grid("0.1,abc").is_err());
        assert!(parse_grid("-1").is_err());
        assert!(parse_grid("").is_err());
    }
}
