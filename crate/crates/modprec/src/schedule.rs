//! Learning-rate scaling and schedule.

use std::f64::consts::PI;

/// Reference batch of the square-root scaling rule.
pub const REFERENCE_BATCH: f64 = 1024.0;

/// `base·√(batch/1024)`.
pub fn scale_lr(base: f64, batch: usize) -> f64 {
    base * (batch as f64 / REFERENCE_BATCH).sqrt()
}

/// Linear warmup from 0 to `peak` over `warmup_ratio·total_steps` steps,
/// then cosine decay to `floor`, reached exactly at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, peak: f64, warmup_ratio: f64, floor: f64) -> f64 {
    let total = total_steps as f64;
    let t = step as f64;
    let warmup = warmup_ratio * total;
    if step >= total_steps {
        return floor;
    }
    if t < warmup {
        return peak * t / warmup;
    }
    let progress = (t - warmup) / (total - warmup);
    floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos())
}
