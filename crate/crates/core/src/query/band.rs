use crate::error::{Error, Result};

/// Default central probability of credible bands.
pub const DEFAULT_BAND_LEVEL: f64 = 0.90;

/// Quantile of already sorted data, linear interpolation between order
/// statistics at position `q (n − 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Central credible interval of a particle sample.
pub fn credible_band(particles: &[f64], level: f64) -> Result<(f64, f64)> {
    if particles.is_empty() {
        return Err(Error::InvalidArgument("credible band of an empty particle vector".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("band level {level} is not in (0, 1)")));
    }
    if particles.iter().any(|p| p.is_nan()) {
        return Err(Error::NonFinite("particle"));
    }
    let mut sorted = particles.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail)))
}
