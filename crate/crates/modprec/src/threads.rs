//! `MODPREC_THREADS` handling. A value of 1 selects the reproducibility mode:
//! everything runs on one thread and timing columns are written as zero.

use crate::error::{HarnessError, Result};

pub const ENV_VAR: &str = "MODPREC_THREADS";

/// Parsed thread setting; `None` when unset.
pub fn configured() -> Result<Option<usize>> {
    match std::env::var(ENV_VAR) {
        Err(_) => Ok(None),
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(HarnessError::Config(format!(
                "{ENV_VAR} must be a positive integer, got {raw:?}"
            ))),
        },
    }
}

pub fn reproducible() -> bool {
    matches!(configured(), Ok(Some(1)))
}

/// Worker count for sweeps.
pub fn worker_count() -> Result<usize> {
    Ok(configured()?.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)))
}
