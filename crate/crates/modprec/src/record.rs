//! Per-step metrics, the CSV layout and the run manifest.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

/// One CSV row. Field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub tokens_or_samples: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_image: f64,
    pub loss_text: f64,
    pub tr_img: f64,
    pub tr_text: f64,
    pub beta_min: f64,
    pub beta_mean: f64,
    pub beta_max: f64,
    pub wall_ms: f64,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "step",
    "tokens_or_samples",
    "lr",
    "loss_total",
    "loss_image",
    "loss_text",
    "tr_img",
    "tr_text",
    "beta_min",
    "beta_mean",
    "beta_max",
    "wall_ms",
];

impl StepRow {
    pub fn is_finite(&self) -> bool {
        [
            self.lr,
            self.loss_total,
            self.loss_image,
            self.loss_text,
            self.tr_img,
            self.tr_text,
            self.beta_min,
            self.beta_mean,
            self.beta_max,
            self.wall_ms,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub rows: Vec<StepRow>,
    pub diverged: bool,
    pub wall_ms: f64,
}

/// Mean of `loss_total` over the last 10% of optimizer steps (at least one).
pub fn smoothed_loss(rows: &[StepRow]) -> Option<f64> {
    smoothed_by(rows, |r| r.loss_total)
}

/// Same window as [`smoothed_loss`] for any column.
pub fn smoothed_by(rows: &[StepRow], column: impl Fn(&StepRow) -> f64) -> Option<f64> {
    let steps: Vec<&StepRow> = rows.iter().filter(|r| r.step > 0).collect();
    if steps.is_empty() {
        return None;
    }
    let tail = steps.len().div_ceil(10);
    let window = &steps[steps.len() - tail..];
    Some(window.iter().map(|r| column(r)).sum::<f64>() / tail as f64)
}

/// Units consumed when `loss_total` first drops to `target`.
pub fn units_to_reach(rows: &[StepRow], target: f64) -> Option<u64> {
    rows.iter()
        .find(|r| r.loss_total <= target)
        .map(|r| r.tokens_or_samples)
}

impl RunRecord {
    pub fn smoothed_loss(&self) -> Option<f64> {
        if self.diverged {
            None
        } else {
            smoothed_loss(&self.rows)
        }
    }

    pub fn total_units(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.tokens_or_samples)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn manifest(&self, csv_file: &str) -> Manifest {
        Manifest {
            name: self.config.run_name(),
            optimizer: self.config.optimizer.name().to_string(),
            seed: self.config.seed,
            version: version_string(),
            wall_time_ms: self.wall_ms,
            diverged: self.diverged,
            steps_completed: self.rows.last().map_or(0, |r| r.step),
            csv: csv_file.to_string(),
            config: self.config.clone(),
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let stem = self.config.run_name();
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.write_csv(&csv_path)?;
        let manifest = self.manifest(&format!("{stem}.csv"));
        let mut f = File::create(&json_path).map_err(|e| HarnessError::io(&json_path, e))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n").map_err(|e| HarnessError::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

pub fn write_rows(path: &Path, rows: &[StepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<StepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(HarnessError::Config(format!(
            "{}: unexpected CSV header {header:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

/// JSON sidecar written next to every run CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub optimizer: String,
    pub seed: u64,
    pub version: String,
    pub wall_time_ms: f64,
    pub diverged: bool,
    pub steps_completed: u64,
    pub csv: String,
    pub config: RunConfig,
}

pub fn version_string() -> String {
    match option_env!("MODPREC_GIT_REV") {
        Some(rev) => format!("modprec {} ({rev})", env!("CARGO_PKG_VERSION")),
        None => format!("modprec {}", env!("CARGO_PKG_VERSION")),
    }
}
