/// Scaled repeat count: `max(round(base * m), 1)`, halves away from zero.
pub fn scale_depth(base: usize, m: f64) -> usize {
    ((base as f64 * m).round() as usize).max(1)
}

/// Scaled channel width: `base * m` rounded to the nearest multiple of
/// `divisor` (halves away from zero), never below `divisor`.
pub fn scale_width(base: usize, m: f64, divisor: usize) -> usize {
    let steps = (base as f64 * m / divisor as f64).round() as usize;
    (steps * divisor).max(divisor)
}

pub const WIDTH_DIVISOR: usize = 8;
