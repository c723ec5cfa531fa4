//! Versioned JSON snapshot of a run between optimizer steps.

use std::path::Path;

use modprec_core::preconditioners::ParamState;
use modprec_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::record::StepRow;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub crate_version: String,
    pub config: RunConfig,
    /// Optimizer steps completed.
    pub step: u64,
    pub params: Vec<Matrix>,
    pub states: Vec<ParamState>,
    /// Last logged covariance traces (image, text).
    pub traces: (f64, f64),
    pub rows: Vec<StepRow>,
}

impl Checkpoint {
    pub fn new(
        config: RunConfig,
        step: u64,
        params: Vec<Matrix>,
        states: Vec<ParamState>,
        traces: (f64, f64),
        rows: Vec<StepRow>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            step,
            params,
            states,
            traces,
            rows,
        }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.check_version()?;
        Ok(ckpt)
    }
}
