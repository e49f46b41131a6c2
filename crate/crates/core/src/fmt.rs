//! Number formatting for CSV output.

/// Formats `x` with nine significant digits.
///
/// Fixed notation for magnitudes in `[1e-4, 1e12)`, scientific otherwise.
/// Output depends only on the bits of `x`, so equal inputs give equal bytes.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_owned();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs();
    if !(1e-4..1e12).contains(&mag) {
        return format!("{x:.8e}");
    }
    // round first so that 9.9999999996 gets one fewer decimal
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    let exp = rounded.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    format!("{rounded:.decimals$}")
}
