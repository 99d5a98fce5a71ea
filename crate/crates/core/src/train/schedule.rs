//! Step learning-rate schedule.

/// `lr0 * factor^k` where `k` counts the decay epochs already reached.
pub fn lr_at(lr0: f64, factor: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let k = decay_epochs.iter().filter(|&&e| e <= epoch).count();
    lr0 * factor.powi(k as i32)
}
