//! Per-cycle end-stop torque history: smoothing, trend-change detection and
//! fatigue-phase classification.
//!
//! The phase bands follow the measured regimes of the limit torque: a new
//! structure sits above 1.4 N·m, gradual stiffness loss runs down to
//! 0.9 N·m, rapid degradation down to 0.7 N·m, and anything below that has
//! negligible load capacity left. Classification uses the torque magnitude
//! so either sign convention works.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::ident::SurrogateFit;

/// Degradation-phase band edges, N·m.
pub const TAU_NOMINAL_EDGE: f64 = 1.4;
pub const TAU_CRITICAL_EDGE: f64 = 0.9;
pub const TAU_FAILURE_EDGE: f64 = 0.7;

/// One fatigue cycle's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub n: u64,
    pub tau_lim: f64,
    /// Present at feature points where the offline estimate ran.
    pub k_hat: Option<f64>,
}

/// Fatigue phase, ordered from worst to best so `Failure < Critical <
/// Degradation < Nominal`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FatiguePhase {
    Failure,
    Critical,
    Degradation,
    Nominal,
}

/// Classifies a limit torque into its fatigue band:
/// `|τ| > 1.4` Nominal, `0.9 ≤ |τ| ≤ 1.4` Degradation,
/// `0.7 ≤ |τ| < 0.9` Critical, `|τ| < 0.7` Failure.
pub fn classify_phase(tau_lim: f64) -> Result<FatiguePhase> {
    if tau_lim.is_nan() {
        return Err(Error::invalid("tau_lim is NaN"));
    }
    let t = tau_lim.abs();
    Ok(if t > TAU_NOMINAL_EDGE {
        FatiguePhase::Nominal
    } else if t >= TAU_CRITICAL_EDGE {
        FatiguePhase::Degradation
    } else if t >= TAU_FAILURE_EDGE {
        FatiguePhase::Critical
    } else {
        FatiguePhase::Failure
    })
}

/// Centered moving average with an odd window; windows shrink symmetrically
/// at the boundaries so affine series pass through unchanged.
pub fn smooth(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid("smoothing window must be odd and >= 3"));
    }
    if window > series.len() {
        return Err(Error::invalid(format!(
            "smoothing window {} exceeds series length {}",
            window,
            series.len()
        )));
    }
    let h = window / 2;
    let n = series.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let m = h.min(i).min(n - 1 - i);
        let slice = &series[i - m..=i + m];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    Ok(out)
}

/// Central second differences `(y[i−1] − 2 y[i] + y[i+1]) / spacing²`;
/// endpoints have no estimate and are `None`.
pub fn second_derivative(series: &[f64], spacing: f64) -> Result<Vec<Option<f64>>> {
    if series.len() < 3 {
        return Err(Error::invalid("second derivative needs >= 3 samples"));
    }
    if !(spacing > 0.0) {
        return Err(Error::invalid("spacing must be positive"));
    }
    let s2 = spacing * spacing;
    let mut out = vec![None; series.len()];
    for i in 1..series.len() - 1 {
        out[i] = Some((series[i - 1] - 2.0 * series[i] + series[i + 1]) / s2);
    }
    Ok(out)
}

/// Trend-change detector parameters.
#[derive(Clone, Debug)]
pub struct TrendOptions {
    /// Baseline feature-point spacing in cycles.
    pub feature_spacing: u64,
    /// Smoothing window over the feature-point series (odd, >= 3).
    pub smooth_window: usize,
    /// A change point must exceed this multiple of the interquartile-based
    /// noise scale of the second-derivative series.
    pub significance: f64,
    /// Insert extra feature points where the torque moves faster than
    /// `refine_threshold` between consecutive baseline points.
    pub refine: bool,
    pub refine_threshold: f64,
}

impl Default for TrendOptions {
    fn default() -> Self {
        TrendOptions {
            feature_spacing: 500,
            smooth_window: 5,
            significance: 4.0,
            refine: false,
            refine_threshold: 0.05,
        }
    }
}

fn check_strictly_increasing(records: &[CycleRecord]) -> Result<()> {
    for w in records.windows(2) {
        if w[1].n <= w[0].n {
            return Err(Error::invalid(format!(
                "cycle records must be strictly increasing in n ({} then {})",
                w[0].n, w[1].n
            )));
        }
    }
    Ok(())
}

/// Selects feature points every `spacing` cycles (falling back to all
/// records when the history is already sparse), optionally densified where
/// the torque changes quickly.
fn select_features(records: &[CycleRecord], opts: &TrendOptions) -> Vec<(u64, f64)> {
    let base: Vec<(u64, f64)> = records
        .iter()
        .filter(|r| r.n % opts.feature_spacing == 0)
        .map(|r| (r.n, r.tau_lim))
        .collect();
    let mut selected = if base.len() < 4 {
        records.iter().map(|r| (r.n, r.tau_lim)).collect()
    } else {
        base
    };
    if opts.refine {
        let mut refined = Vec::with_capacity(selected.len() * 2);
        for w in selected.windows(2) {
            refined.push(w[0]);
            if (w[1].1 - w[0].1).abs() > opts.refine_threshold {
                let mid = (w[0].0 + w[1].0) / 2;
                if let Some(r) = records.iter().min_by_key(|r| r.n.abs_diff(mid)) {
                    if r.n > w[0].0 && r.n < w[1].0 {
                        refined.push((r.n, r.tau_lim));
                    }
                }
            }
        }
        refined.push(*selected.last().unwrap());
        selected = refined;
    }
    selected
}

/// Finds the cycle index where the smoothed second derivative of the
/// feature-point torque series peaks, provided the peak is significant
/// against the series' own robust noise scale. Returns `None` on monotone
/// or flat histories.
pub fn detect_trend_change(records: &[CycleRecord], opts: &TrendOptions) -> Result<Option<u64>> {
    check_strictly_increasing(records)?;
    let features = select_features(records, opts);
    if features.len() < 3 {
        return Err(Error::invalid(
            "trend-change detection needs at least 3 feature points",
        ));
    }
    let tau: Vec<f64> = features.iter().map(|f| f.1).collect();
    let window = opts.smooth_window.min(if tau.len() % 2 == 1 {
        tau.len()
    } else {
        tau.len() - 1
    });
    let smoothed = if window >= 3 { smooth(&tau, window)? } else { tau.clone() };
    // Spacing between feature points; the baseline grid is uniform.
    let mut gaps: Vec<f64> = features
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64)
        .collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let spacing = gaps[gaps.len() / 2];
    let d2 = second_derivative(&smoothed, spacing)?;
    let interior: Vec<(usize, f64)> = d2
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    if interior.is_empty() {
        return Ok(None);
    }
    let mut values: Vec<f64> = interior.iter().map(|(_, v)| *v).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quart = |p: f64| -> f64 {
        let idx = p * (values.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        values[lo] + (values[hi] - values[lo]) * (idx - lo as f64)
    };
    let noise_scale = (quart(0.75) - quart(0.25)) / 1.349;
    let (best_i, best_v) = interior
        .iter()
        .fold((0usize, 0.0f64), |(bi, bv), &(i, v)| {
            if v.abs() > bv {
                (i, v.abs())
            } else {
                (bi, bv)
            }
        });
    if best_v > opts.significance * noise_scale && best_v > 0.0 {
        Ok(Some(features[best_i].0))
    } else {
        Ok(None)
    }
}

/// Direction of the recent smoothed torque trend.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    Declining,
    Stable,
    Rising,
}

/// Assessment of the robot's fatigue state from its cycle history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Assessment {
    pub phase: FatiguePhase,
    pub latest_tau: f64,
    pub k_hat_estimate: f64,
    pub extrapolated: bool,
    pub change_point: Option<u64>,
    pub trend: Trend,
}

/// Classifies the latest record, estimates stiffness through the surrogate,
/// and reports the change point and recent trend.
pub fn assess(records: &[CycleRecord], fit: &SurrogateFit) -> Result<Assessment> {
    if records.is_empty() {
        return Err(Error::invalid("assessment needs at least one record"));
    }
    check_strictly_increasing(records)?;
    let latest = records.last().unwrap();
    let phase = classify_phase(latest.tau_lim)?;
    let pred = crate::ident::predict_stiffness(fit, latest.tau_lim.abs());
    let change_point = if records.len() >= 3 {
        detect_trend_change(records, &TrendOptions::default())?
    } else {
        None
    };
    let trend = recent_trend(records)?;
    Ok(Assessment {
        phase,
        latest_tau: latest.tau_lim,
        k_hat_estimate: pred.k_hat,
        extrapolated: pred.extrapolated,
        change_point,
        trend,
    })
}

fn recent_trend(records: &[CycleRecord]) -> Result<Trend> {
    if records.len() < 2 {
        return Ok(Trend::Stable);
    }
    let take = records.len().min(9);
    let tail = &records[records.len() - take..];
    let tau: Vec<f64> = tail.iter().map(|r| r.tau_lim.abs()).collect();
    let window = if take >= 5 { 5 } else { 3.min(take) };
    let smoothed = if window >= 3 && window % 2 == 1 {
        smooth(&tau, window)?
    } else {
        tau
    };
    let slope = (smoothed.last().unwrap() - smoothed.first().unwrap())
        / (tail.last().unwrap().n - tail.first().unwrap().n).max(1) as f64;
    Ok(if slope < -1e-12 {
        Trend::Declining
    } else if slope > 1e-12 {
        Trend::Rising
    } else {
        Trend::Stable
    })
}

// ---------------------------------------------------------------------------
// CSV interface (`n,tau_lim_Nm[,k_hat_N_per_m]`)
// ---------------------------------------------------------------------------

pub fn read_cycles_csv<R: Read>(reader: R) -> Result<Vec<CycleRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let has_khat = {
        let headers = rdr.headers().map_err(|e| Error::CsvParse {
            line: 1,
            message: e.to_string(),
        })?;
        if headers.len() < 2 || &headers[0] != "n" || &headers[1] != "tau_lim_Nm" {
            return Err(Error::CsvParse {
                line: 1,
                message: format!("expected header n,tau_lim_Nm[,k_hat_N_per_m], got {headers:?}"),
            });
        }
        headers.len() > 2 && &headers[2] == "k_hat_N_per_m"
    };
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::CsvParse {
            line,
            message: e.to_string(),
        })?;
        let n: u64 = record
            .get(0)
            .ok_or_else(|| Error::CsvParse {
                line,
                message: "missing n".into(),
            })?
            .parse()
            .map_err(|e| Error::CsvParse {
                line,
                message: format!("bad n: {e}"),
            })?;
        let tau: f64 = record
            .get(1)
            .ok_or_else(|| Error::CsvParse {
                line,
                message: "missing tau_lim_Nm".into(),
            })?
            .parse()
            .map_err(|e| Error::CsvParse {
                line,
                message: format!("bad tau_lim_Nm: {e}"),
            })?;
        let k_hat = if has_khat {
            match record.get(2) {
                Some("") | None => None,
                Some(text) => Some(text.parse().map_err(|e| Error::CsvParse {
                    line,
                    message: format!("bad k_hat_N_per_m: {e}"),
                })?),
            }
        } else {
            None
        };
        out.push(CycleRecord { n, tau_lim: tau, k_hat });
    }
    check_strictly_increasing(&out)?;
    Ok(out)
}

pub fn write_cycles_csv<W: Write>(records: &[CycleRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let any_khat = records.iter().any(|r| r.k_hat.is_some());
    let header: &[&str] = if any_khat {
        &["n", "tau_lim_Nm", "k_hat_N_per_m"]
    } else {
        &["n", "tau_lim_Nm"]
    };
    wtr.write_record(header).map_err(|e| Error::CsvParse {
        line: 1,
        message: e.to_string(),
    })?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![r.n.to_string(), format!("{:.9}", r.tau_lim)];
        if any_khat {
            row.push(r.k_hat.map(|k| format!("{k:.6}")).unwrap_or_default());
        }
        wtr.write_record(&row).map_err(|e| Error::CsvParse {
            line: i + 2,
            message: e.to_string(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::{fit_surrogate, FeaturePoint};
    use approx::assert_relative_eq;

    #[test]
    fn phase_bands_match_published_thresholds() {
        assert_eq!(classify_phase(1.0).unwrap(), FatiguePhase::Degradation);
        assert_eq!(classify_phase(0.8).unwrap(), FatiguePhase::Critical);
        assert_eq!(classify_phase(0.65).unwrap(), FatiguePhase::Failure);
        // Boundary inclusivity.
        assert_eq!(classify_phase(0.7).unwrap(), FatiguePhase::Critical);
        assert_eq!(classify_phase(0.9).unwrap(), FatiguePhase::Degradation);
        assert_eq!(classify_phase(1.4).unwrap(), FatiguePhase::Degradation);
        assert_eq!(classify_phase(1.41).unwrap(), FatiguePhase::Nominal);
        // Magnitude convention.
        assert_eq!(classify_phase(-1.4).unwrap(), FatiguePhase::Degradation);
        assert!(classify_phase(f64::NAN).is_err());
    }

    #[test]
    fn phase_order_is_total() {
        assert!(FatiguePhase::Nominal > FatiguePhase::Degradation);
        assert!(FatiguePhase::Degradation > FatiguePhase::Critical);
        assert!(FatiguePhase::Critical > FatiguePhase::Failure);
    }

    #[test]
    fn smoothing_preserves_constants_and_affine() {
        let c = vec![2.5; 20];
        assert_eq!(smooth(&c, 5).unwrap(), c);
        let lin: Vec<f64> = (0..20).map(|i| 3.0 + 0.5 * i as f64).collect();
        let sm = smooth(&lin, 5).unwrap();
        for (a, b) in sm.iter().zip(lin.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn impulse_spreads_to_window_average() {
        let mut series = vec![0.0; 11];
        series[5] = 10.0;
        let sm = smooth(&series, 5).unwrap();
        assert_relative_eq!(sm[5], 2.0, epsilon = 1e-12);
        assert_relative_eq!(sm[4], 2.0, epsilon = 1e-12);
        assert_relative_eq!(sm[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn smooth_rejects_bad_windows() {
        let s = vec![0.0; 10];
        assert!(smooth(&s, 4).is_err());
        assert!(smooth(&s, 1).is_err());
        assert!(smooth(&s, 11).is_err());
    }

    #[test]
    fn second_derivative_exact_on_quadratics() {
        let affine: Vec<f64> = (0..10).map(|i| 1.0 + 2.0 * i as f64).collect();
        for v in second_derivative(&affine, 1.0).unwrap().iter().flatten() {
            assert_relative_eq!(*v, 0.0, epsilon = 1e-12);
        }
        let quad: Vec<f64> = (0..10).map(|i| 3.0 * (i as f64) * (i as f64)).collect();
        let d2 = second_derivative(&quad, 1.0).unwrap();
        assert!(d2[0].is_none() && d2[9].is_none());
        for v in d2.iter().flatten() {
            assert_relative_eq!(*v, 6.0, epsilon = 1e-10);
        }
        assert!(second_derivative(&[1.0, 2.0], 1.0).is_err());
        assert!(second_derivative(&affine, 0.0).is_err());
    }

    fn linear_records(n_max: u64, step: u64, tau0: f64, slope: f64) -> Vec<CycleRecord> {
        (0..=n_max / step)
            .map(|i| {
                let n = i * step;
                CycleRecord {
                    n,
                    tau_lim: tau0 - slope * n as f64,
                    k_hat: None,
                }
            })
            .collect()
    }

    #[test]
    fn monotone_decline_has_no_change_point() {
        let records = linear_records(10_000, 500, 1.4, 3e-5);
        assert_eq!(
            detect_trend_change(&records, &TrendOptions::default()).unwrap(),
            None
        );
    }

    #[test]
    fn flat_noise_has_no_change_point_in_100_runs() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 0.003).unwrap();
        let mut false_positives = 0;
        for seed in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let records: Vec<CycleRecord> = (0..=20)
                .map(|i| CycleRecord {
                    n: i * 500,
                    tau_lim: 1.3 + normal.sample(&mut rng),
                    k_hat: None,
                })
                .collect();
            if detect_trend_change(&records, &TrendOptions::default())
                .unwrap()
                .is_some()
            {
                false_positives += 1;
            }
        }
        assert_eq!(false_positives, 0, "{false_positives} false positives");
    }

    #[test]
    fn offset_invariance_of_change_point() {
        let profile = crate::synth::DegradationProfile::default();
        let records = crate::synth::generate_degradation_series(&profile, 10_000).unwrap();
        let cp = detect_trend_change(&records, &TrendOptions::default()).unwrap();
        let shifted: Vec<CycleRecord> = records
            .iter()
            .map(|r| CycleRecord {
                n: r.n,
                tau_lim: r.tau_lim + 5.0,
                k_hat: r.k_hat,
            })
            .collect();
        let cp_shifted = detect_trend_change(&shifted, &TrendOptions::default()).unwrap();
        assert_eq!(cp, cp_shifted);
        let cp = cp.expect("planted change point");
        assert!(cp.abs_diff(9230) <= 500, "change point at {cp}");
    }

    fn simple_fit() -> SurrogateFit {
        fit_surrogate(&[
            FeaturePoint { n: 0, tau_lim: 0.6, k_hat: 600.0 },
            FeaturePoint { n: 1, tau_lim: 1.0, k_hat: 1000.0 },
            FeaturePoint { n: 2, tau_lim: 1.4, k_hat: 1400.0 },
        ])
        .unwrap()
    }

    #[test]
    fn assessment_on_failure_history() {
        let records = vec![
            CycleRecord { n: 0, tau_lim: 1.4, k_hat: None },
            CycleRecord { n: 500, tau_lim: 1.1, k_hat: None },
            CycleRecord { n: 1000, tau_lim: 0.6, k_hat: None },
        ];
        let a = assess(&records, &simple_fit()).unwrap();
        assert_eq!(a.phase, FatiguePhase::Failure);
        assert_eq!(a.trend, Trend::Declining);
        assert_relative_eq!(a.k_hat_estimate, 600.0, epsilon = 1e-9);
    }

    #[test]
    fn severed_scenario_is_critical_boundary() {
        let records = vec![CycleRecord { n: 0, tau_lim: 0.7, k_hat: None }];
        let a = assess(&records, &simple_fit()).unwrap();
        assert_eq!(a.phase, FatiguePhase::Critical);
        assert_eq!(a.change_point, None);
    }

    #[test]
    fn single_healthy_record() {
        let records = vec![CycleRecord { n: 0, tau_lim: 1.4, k_hat: None }];
        let a = assess(&records, &simple_fit()).unwrap();
        assert_eq!(a.phase, FatiguePhase::Degradation);
        assert_eq!(a.change_point, None);
        assert_eq!(a.trend, Trend::Stable);
    }

    #[test]
    fn assessment_monotone_over_suffix_re_evaluation() {
        // On a nonincreasing history, assessing any longer prefix never
        // reports a healthier phase than a later one.
        let profile = crate::synth::DegradationProfile {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let records = crate::synth::generate_degradation_series(&profile, 10_000).unwrap();
        let fit = simple_fit();
        let mut last_phase = FatiguePhase::Nominal;
        for end in [1usize, 2000, 6000, 9500, 10_001] {
            let a = assess(&records[..end], &fit).unwrap();
            assert!(
                a.phase <= last_phase,
                "phase got healthier: {:?} after {:?}",
                a.phase,
                last_phase
            );
            last_phase = a.phase;
        }
    }

    #[test]
    fn cycles_csv_round_trip() {
        let records = vec![
            CycleRecord { n: 0, tau_lim: 1.4, k_hat: Some(61000.0) },
            CycleRecord { n: 500, tau_lim: 1.37, k_hat: None },
            CycleRecord { n: 1000, tau_lim: 1.33, k_hat: Some(58000.0) },
        ];
        let mut buf = Vec::new();
        write_cycles_csv(&records, &mut buf).unwrap();
        let back = read_cycles_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].k_hat, None);
        assert_relative_eq!(back[2].k_hat.unwrap(), 58000.0, epsilon = 1e-6);
        // Non-increasing n rejected.
        let bad = "n,tau_lim_Nm\n10,1.0\n10,0.9\n";
        assert!(read_cycles_csv(bad.as_bytes()).is_err());
    }
}
