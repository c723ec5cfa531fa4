//! Run configuration: TOML file plus `key=value` overrides.

use std::path::Path;

use modprec_core::preconditioners::PreconditionerKind;
use modprec_core::{FoldConfig, FopSettings, ModalityTaskSpec, OptimizerHyper};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::schedule::scale_lr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Shampoo,
    Soap,
    FopSoap,
    MlfopSoap,
    FopShampoo,
    MlfopShampoo,
}

/// How the micro-gradients of one window become the step gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accumulation {
    Mean,
    /// Projection between the means of the two window halves.
    HalfSplit,
    /// Hierarchical dyadic folding.
    Folded,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Adamw,
        OptimizerKind::Shampoo,
        OptimizerKind::Soap,
        OptimizerKind::FopSoap,
        OptimizerKind::MlfopSoap,
        OptimizerKind::FopShampoo,
        OptimizerKind::MlfopShampoo,
    ];

    pub fn preconditioner(self) -> PreconditionerKind {
        match self {
            OptimizerKind::Adamw => PreconditionerKind::Adamw,
            OptimizerKind::Shampoo | OptimizerKind::FopShampoo | OptimizerKind::MlfopShampoo => {
                PreconditionerKind::Shampoo
            }
            OptimizerKind::Soap | OptimizerKind::FopSoap | OptimizerKind::MlfopSoap => PreconditionerKind::Soap,
        }
    }

    pub fn accumulation(self) -> Accumulation {
        match self {
            OptimizerKind::Adamw | OptimizerKind::Shampoo | OptimizerKind::Soap => Accumulation::Mean,
            OptimizerKind::FopSoap | OptimizerKind::FopShampoo => Accumulation::HalfSplit,
            OptimizerKind::MlfopSoap | OptimizerKind::MlfopShampoo => Accumulation::Folded,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Shampoo => "shampoo",
            OptimizerKind::Soap => "soap",
            OptimizerKind::FopSoap => "fop_soap",
            OptimizerKind::MlfopSoap => "mlfop_soap",
            OptimizerKind::FopShampoo => "fop_shampoo",
            OptimizerKind::MlfopShampoo => "mlfop_shampoo",
        }
    }
}

/// Folding options not implied by the batch layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldOptions {
    /// `β` at fold level `l` is multiplied by `level_decay^l`.
    pub level_decay: f64,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self { level_decay: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output file stem; derived from optimizer, LR and seed when absent.
    pub name: Option<String>,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    /// Apply `base_lr·√(global_batch/1024)`; otherwise `base_lr` is the peak.
    pub sqrt_lr_scaling: bool,
    pub global_batch: usize,
    pub micro_batch: usize,
    pub total_steps: u64,
    pub warmup_ratio: f64,
    pub lr_floor: f64,
    /// Seeds the task (materialization, initialization, sample stream).
    pub seed: u64,
    pub task: ModalityTaskSpec,
    pub hyper: OptimizerHyper,
    pub fop: FopSettings,
    pub fold: FoldOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: None,
            optimizer: OptimizerKind::Adamw,
            base_lr: 0.01,
            sqrt_lr_scaling: true,
            global_batch: 64,
            micro_batch: 8,
            total_steps: 500,
            warmup_ratio: 0.1,
            lr_floor: 1e-6,
            seed: 0,
            task: ModalityTaskSpec::default(),
            hyper: OptimizerHyper::default(),
            fop: FopSettings::default(),
            fold: FoldOptions::default(),
        }
    }
}

impl RunConfig {
    /// Micro-batches per optimizer step.
    pub fn accumulation_steps(&self) -> usize {
        self.global_batch.checked_div(self.micro_batch).unwrap_or(0)
    }

    pub fn peak_lr(&self) -> f64 {
        if self.sqrt_lr_scaling {
            scale_lr(self.base_lr, self.global_batch)
        } else {
            self.base_lr
        }
    }

    /// Task spec with the run seed applied.
    pub fn task_spec(&self) -> ModalityTaskSpec {
        ModalityTaskSpec {
            seed: self.seed,
            ..self.task.clone()
        }
    }

    pub fn fold_config(&self) -> Result<FoldConfig> {
        let cfg = FoldConfig {
            window_size: self.accumulation_steps(),
            fop: self.fop.clone(),
            level_decay: self.fold.level_decay,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}-lr{}-s{}", self.optimizer.name(), self.base_lr, self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.micro_batch == 0 || self.global_batch == 0 {
            return bad("global_batch and micro_batch must be positive".into());
        }
        if self.global_batch % self.micro_batch != 0 {
            return bad(format!(
                "global_batch {} is not a multiple of micro_batch {}",
                self.global_batch, self.micro_batch
            ));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be finite and nonnegative, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor.is_finite()) {
            return bad(format!(
                "lr_floor must be finite and nonnegative, got {}",
                self.lr_floor
            ));
        }
        let k = self.accumulation_steps();
        match self.optimizer.accumulation() {
            Accumulation::Mean => {}
            Accumulation::HalfSplit => {
                if k < 2 || k % 2 != 0 {
                    return bad(format!(
                        "{} needs an even number of micro-batches per step, got {k}",
                        self.optimizer.name()
                    ));
                }
            }
            Accumulation::Folded => {
                self.fold_config()?;
            }
        }
        self.hyper.validate()?;
        self.fop.validate()?;
        self.task_spec().validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config(format!("invalid TOML: {e}")))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

/// Applies `section.key=value`; the value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("invalid override key {key:?}")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("{part:?} in {key:?} is not a section")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
