//! Closed-form design and evaluation calculators: stopper sizing, limit
//! compression safety and the normalized tip deflection ratio.
//!
//! The stopper and compression arithmetic quantizes inputs to 1 µm so the
//! millimetre-scale decimal values used on drawings subtract exactly instead
//! of drifting in binary floating point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn to_um(mm: f64) -> i64 {
    (mm * 1000.0).round() as i64
}

fn from_um(um: i64) -> f64 {
    um as f64 / 1000.0
}

/// Stopper geometry of one module, millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopperGeometry {
    /// Total radial span.
    pub l_t: f64,
    /// Flexible arc length at the limit pose.
    pub l_f: f64,
    /// Minimum radial clearance.
    pub c: f64,
    /// Resulting stopper length.
    pub l_s: f64,
}

impl StopperGeometry {
    pub fn design(l_t: f64, l_f: f64, c: f64) -> Result<Self> {
        let l_s = stopper_length(l_t, l_f, c)?;
        Ok(StopperGeometry { l_t, l_f, c, l_s })
    }
}

/// Stopper length `L_s = L_t − L_f − c` (mm), exact at 1 µm resolution.
pub fn stopper_length(l_t: f64, l_f: f64, c: f64) -> Result<f64> {
    if !(l_t > 0.0 && l_f >= 0.0 && c >= 0.0) {
        return Err(Error::invalid(
            "stopper inputs must be positive (clearances nonnegative)",
        ));
    }
    let l_s = to_um(l_t) - to_um(l_f) - to_um(c);
    if l_s <= 0 {
        return Err(Error::DesignInfeasible(format!(
            "L_t − L_f − c = {:.3} mm is not positive",
            from_um(l_s)
        )));
    }
    Ok(from_um(l_s))
}

/// Outcome of the limit-compression safety check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionCheck {
    /// Shaft-spacing change `d0 − d_limit`, mm.
    pub delta: f64,
    /// True when `delta` is strictly below the safe bound.
    pub safe: bool,
}

/// Compression at the limit pose and whether it stays strictly below the
/// fatigue-safe bound (default 25 mm). Strictness is conservative: the bound
/// itself already shows measurable degradation risk in cyclic testing.
pub fn limit_compression_check(d0: f64, d_limit: f64, safe_bound: f64) -> Result<CompressionCheck> {
    if !(d0 > d_limit && d_limit > 0.0) {
        return Err(Error::invalid(format!(
            "need d0 > d_limit > 0, got d0 = {d0}, d_limit = {d_limit}"
        )));
    }
    if !(safe_bound > 0.0) {
        return Err(Error::invalid("safe_bound must be positive"));
    }
    let delta_um = to_um(d0) - to_um(d_limit);
    Ok(CompressionCheck {
        delta: from_um(delta_um),
        safe: delta_um < to_um(safe_bound),
    })
}

/// Normalized tip deflection ratio `|Δy| / L` (full precision; round with
/// [`round4`] for table-style reporting).
pub fn ntdr(delta_y: f64, length: f64) -> Result<f64> {
    if !(length > 0.0) {
        return Err(Error::invalid(format!(
            "robot length must be positive, got {length}"
        )));
    }
    Ok(delta_y.abs() / length)
}

/// Percentage reduction of `ntdr_b` relative to `ntdr_a`.
pub fn drift_reduction(ntdr_a: f64, ntdr_b: f64) -> Result<f64> {
    if !(ntdr_a > 0.0) {
        return Err(Error::invalid(format!(
            "reference NTDR must be positive, got {ntdr_a}"
        )));
    }
    Ok(100.0 * (1.0 - ntdr_b / ntdr_a))
}

/// Rounds to four decimal places, the reporting format of the deflection
/// tables.
pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn stopper_length_published_geometry() {
        let l_s = stopper_length(75.9, 45.2, 4.8).unwrap();
        assert_eq!(l_s, 25.9);
        let geom = StopperGeometry::design(75.9, 45.2, 4.8).unwrap();
        assert_eq!(geom.l_s, 25.9);
        assert!(geom.l_s < geom.l_t);
    }

    #[test]
    fn stopper_length_degenerate_and_infeasible() {
        assert_eq!(stopper_length(50.0, 0.0, 0.0).unwrap(), 50.0);
        assert!(matches!(
            stopper_length(50.0, 45.0, 10.0),
            Err(Error::DesignInfeasible(_))
        ));
        assert!(stopper_length(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn compression_check_published_and_boundary() {
        let c = limit_compression_check(54.3, 44.1, 25.0).unwrap();
        assert_eq!(c.delta, 10.2);
        assert!(c.safe);
        // Exactly at the bound: strict comparison keeps it unsafe.
        let c = limit_compression_check(54.3, 54.3 - 25.0, 25.0).unwrap();
        assert_eq!(c.delta, 25.0);
        assert!(!c.safe);
        // The amplitude that failed in cyclic testing.
        let c = limit_compression_check(54.3, 19.3, 25.0).unwrap();
        assert_eq!(c.delta, 35.0);
        assert!(!c.safe);
        assert!(limit_compression_check(44.1, 54.3, 25.0).is_err());
    }

    #[test]
    fn ntdr_table_values() {
        assert_eq!(round4(ntdr(41.24, 430.9).unwrap()), 0.0957);
        assert_eq!(round4(ntdr(16.44, 450.4).unwrap()), 0.0365);
        assert_eq!(round4(ntdr(8.35, 450.4).unwrap()), 0.0185);
        assert_eq!(ntdr(0.0, 123.4).unwrap(), 0.0);
        assert!(ntdr(1.0, 0.0).is_err());
    }

    #[test]
    fn ntdr_scale_invariance() {
        for k in [0.5, 2.0, 17.3] {
            let a = ntdr(41.24, 430.9).unwrap();
            let b = ntdr(41.24 * k, 430.9 * k).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn drift_reduction_published_ratios() {
        let r = drift_reduction(0.0957, 0.0185).unwrap();
        assert!((r - 80.7).abs() < 0.1, "{r}");
        let r = drift_reduction(0.0365, 0.0185).unwrap();
        assert!((r - 49.3).abs() < 0.1, "{r}");
        assert_eq!(drift_reduction(0.5, 0.5).unwrap(), 0.0);
        assert!(drift_reduction(0.0, 0.1).is_err());
    }

    #[test]
    fn ratio_reconstruction_matches_published_multiples() {
        let reference = round4(ntdr(41.24, 430.9).unwrap());
        let conventional = round4(ntdr(16.44, 450.4).unwrap());
        let proposed = round4(ntdr(8.35, 450.4).unwrap());
        assert!((reference / proposed - 5.17).abs() < 0.01);
        assert!((conventional / proposed - 1.97).abs() < 0.01);
    }
}
