//! Merges saved runs into loss curves and sample-efficiency ratios.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::record::{read_rows, smoothed_loss, units_to_reach, Manifest, StepRow};

pub struct LoadedRun {
    pub manifest: Manifest,
    pub rows: Vec<StepRow>,
}

/// Loads every `*.json` manifest in `dir` together with its CSV.
pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut runs = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let Ok(manifest) = serde_json::from_str::<Manifest>(&text) else {
            continue;
        };
        let rows = read_rows(&dir.join(&manifest.csv))?;
        runs.push(LoadedRun { manifest, rows });
    }
    Ok(runs)
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    run: &'a str,
    optimizer: &'a str,
    seed: u64,
    base_lr: f64,
    step: u64,
    tokens_or_samples: u64,
    loss_total: f64,
    loss_image: f64,
    loss_text: f64,
}

/// Samples a run needs to reach the baseline's final smoothed loss, relative
/// to the baseline's total.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub run: String,
    pub baseline: String,
    pub seed: u64,
    pub target_loss: f64,
    pub units_to_reach: Option<u64>,
    pub baseline_units: u64,
    /// Missing when the target is never reached.
    pub ratio: Option<f64>,
}

/// Efficiency of `rows` against a baseline run.
pub fn efficiency_ratio(rows: &[StepRow], baseline: &[StepRow]) -> Option<(f64, Option<u64>, u64, Option<f64>)> {
    let target = smoothed_loss(baseline)?;
    let total = baseline.last()?.tokens_or_samples;
    let reach = units_to_reach(rows, target);
    let ratio = reach.map(|u| u as f64 / total as f64);
    Some((target, reach, total, ratio))
}

/// Baseline per seed: the non-diverged `adamw` run with the lowest smoothed loss.
pub fn efficiency_table(runs: &[LoadedRun]) -> Vec<EfficiencyRow> {
    let mut baselines: BTreeMap<u64, (&LoadedRun, f64)> = BTreeMap::new();
    for run in runs
        .iter()
        .filter(|r| r.manifest.optimizer == "adamw" && !r.manifest.diverged)
    {
        if let Some(loss) = smoothed_loss(&run.rows) {
            let slot = baselines.entry(run.manifest.seed).or_insert((run, loss));
            if loss < slot.1 {
                *slot = (run, loss);
            }
        }
    }
    let mut out = Vec::new();
    for run in runs.iter().filter(|r| !r.manifest.diverged) {
        let Some((base, _)) = baselines.get(&run.manifest.seed) else {
            continue;
        };
        if std::ptr::eq(*base, run) {
            continue;
        }
        if let Some((target, reach, total, ratio)) = efficiency_ratio(&run.rows, &base.rows) {
            out.push(EfficiencyRow {
                run: run.manifest.name.clone(),
                baseline: base.manifest.name.clone(),
                seed: run.manifest.seed,
                target_loss: target,
                units_to_reach: reach,
                baseline_units: total,
                ratio,
            });
        }
    }
    out
}

/// Writes the merged curves to `out` and the efficiency table next to it as
/// `<stem>_efficiency.csv`. Returns both paths.
pub fn write_report(runs_dir: &Path, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let runs = load_runs(runs_dir)?;
    if runs.is_empty() {
        return Err(HarnessError::Config(format!("no runs found in {}", runs_dir.display())));
    }
    let mut w = csv::Writer::from_path(out)?;
    for run in &runs {
        for row in &run.rows {
            w.serialize(CurveRow {
                run: &run.manifest.name,
                optimizer: &run.manifest.optimizer,
                seed: run.manifest.seed,
                base_lr: run.manifest.config.base_lr,
                step: row.step,
                tokens_or_samples: row.tokens_or_samples,
                loss_total: row.loss_total,
                loss_image: row.loss_image,
                loss_text: row.loss_text,
            })?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(out, e))?;

    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let eff_path = out.with_file_name(format!("{stem}_efficiency.csv"));
    let mut w = csv::Writer::from_path(&eff_path)?;
    let table = efficiency_table(&runs);
    if table.is_empty() {
        w.write_record([
            "run",
            "baseline",
            "seed",
            "target_loss",
            "units_to_reach",
            "baseline_units",
            "ratio",
        ])?;
    }
    for row in table {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(&eff_path, e))?;
    Ok((out.to_path_buf(), eff_path))
}
