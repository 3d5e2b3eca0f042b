//! Limit-event detection on motor-side telemetry.
//!
//! Stopper engagement shows up as two coincident signatures in the 30 Hz
//! logs: the cable displacement abruptly plateaus while the torque slope
//! rises sharply. Both detectors are windowed and ratio-based so they are
//! invariant to torque scaling and index shifts, and they operate on the
//! torque magnitude so negative-signed motor conventions work unchanged
//! (the reported limit torque keeps the input sign).

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Default minimum pre-plateau motion rate (mm/s) distinguishing "stopped"
/// from "never moved".
pub const DEFAULT_MIN_MOTION_RATE: f64 = 1.0;

/// Minimum t-statistic of the post-window slope for a knee candidate; keeps
/// flat noise from producing knees while staying scale-invariant. The tails
/// of the slope statistic are Student-t with ~13 degrees of freedom for the
/// default windows, so a wide margin is needed over thousands of indices.
pub const KNEE_MIN_T_STAT: f64 = 12.0;

/// Uniformly sampled motor-side telemetry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TelemetryTrace {
    sample_rate: f64,
    t: Vec<f64>,
    torque: Vec<f64>,
    displacement: Vec<f64>,
}

impl TelemetryTrace {
    /// Builds a trace from explicit time stamps, validating the invariants:
    /// equal lengths >= 2 and strictly increasing, uniform time steps within
    /// 1e-6 s of `1/sample_rate`.
    pub fn new(
        sample_rate: f64,
        t: Vec<f64>,
        torque: Vec<f64>,
        displacement: Vec<f64>,
    ) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        if t.len() < 2 || t.len() != torque.len() || t.len() != displacement.len() {
            return Err(Error::invalid(format!(
                "series lengths {}/{}/{} must be equal and >= 2",
                t.len(),
                torque.len(),
                displacement.len()
            )));
        }
        let dt = 1.0 / sample_rate;
        for (i, w) in t.windows(2).enumerate() {
            let step = w[1] - w[0];
            if step <= 0.0 || (step - dt).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "time step {:.9} s at sample {} deviates from 1/{} Hz",
                    step, i, sample_rate
                )));
            }
        }
        Ok(TelemetryTrace {
            sample_rate,
            t,
            torque,
            displacement,
        })
    }

    /// Builds a trace with implicit time stamps `i / sample_rate`.
    pub fn from_samples(
        sample_rate: f64,
        torque: Vec<f64>,
        displacement: Vec<f64>,
    ) -> Result<Self> {
        let t = (0..torque.len()).map(|i| i as f64 / sample_rate).collect();
        Self::new(sample_rate, t, torque, displacement)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    /// Motor torque, N·m.
    pub fn torque(&self) -> &[f64] {
        &self.torque
    }

    /// Cable displacement at the motor, mm.
    pub fn displacement(&self) -> &[f64] {
        &self.displacement
    }

    /// Reads the `t_s,torque_Nm,displacement_mm` CSV format. The sample rate
    /// is inferred from the first time step.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        {
            let headers = rdr.headers().map_err(|e| Error::CsvParse {
                line: 1,
                message: e.to_string(),
            })?;
            let expected = ["t_s", "torque_Nm", "displacement_mm"];
            if headers.len() < 3
                || headers.iter().take(3).zip(expected.iter()).any(|(h, e)| h != *e)
            {
                return Err(Error::CsvParse {
                    line: 1,
                    message: format!("expected header t_s,torque_Nm,displacement_mm, got {headers:?}"),
                });
            }
        }
        let mut t = Vec::new();
        let mut torque = Vec::new();
        let mut displacement = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| Error::CsvParse {
                line,
                message: e.to_string(),
            })?;
            let parse = |field: usize, name: &str| -> Result<f64> {
                record
                    .get(field)
                    .ok_or_else(|| Error::CsvParse {
                        line,
                        message: format!("missing {name}"),
                    })?
                    .parse::<f64>()
                    .map_err(|e| Error::CsvParse {
                        line,
                        message: format!("bad {name}: {e}"),
                    })
            };
            t.push(parse(0, "t_s")?);
            torque.push(parse(1, "torque_Nm")?);
            displacement.push(parse(2, "displacement_mm")?);
        }
        if t.len() < 2 {
            return Err(Error::CsvParse {
                line: t.len() + 1,
                message: "telemetry needs at least two samples".to_string(),
            });
        }
        let sample_rate = 1.0 / (t[1] - t[0]);
        Self::new(sample_rate, t, torque, displacement)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["t_s", "torque_Nm", "displacement_mm"])
            .map_err(|e| Error::CsvParse {
                line: 1,
                message: e.to_string(),
            })?;
        for i in 0..self.len() {
            wtr.write_record(&[
                format!("{:.9}", self.t[i]),
                format!("{:.9}", self.torque[i]),
                format!("{:.6}", self.displacement[i]),
            ])
            .map_err(|e| Error::CsvParse {
                line: i + 2,
                message: e.to_string(),
            })?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A detected stopper-engagement event.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LimitEvent {
    /// Sample index of contact (torque-knee location).
    pub index: usize,
    /// Contact time, s.
    pub t_contact: f64,
    /// Limit torque read after the settle window, N·m, sign preserved.
    pub tau_lim: f64,
    /// Displacement at the plateau, mm.
    pub plateau_displacement: f64,
}

/// Detector parameters. Defaults resolve the published 30 Hz, ~20 s
/// approach traces.
#[derive(Clone, Debug)]
pub struct DetectOptions {
    pub plateau_window: usize,
    pub plateau_eps_mm: f64,
    pub min_motion_rate_mm_s: f64,
    pub knee_pre_window: usize,
    pub knee_post_window: usize,
    pub slope_ratio: f64,
    pub knee_min_t_stat: f64,
    /// Plateau and knee indices must agree within this many samples.
    pub coincidence_window: usize,
    /// Samples skipped after contact before the torque readout window.
    pub settle_skip: usize,
    /// Readout window length; the limit torque is its median.
    pub settle_window: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            plateau_window: 10,
            plateau_eps_mm: 0.5,
            min_motion_rate_mm_s: DEFAULT_MIN_MOTION_RATE,
            knee_pre_window: 15,
            knee_post_window: 15,
            slope_ratio: 5.0,
            knee_min_t_stat: KNEE_MIN_T_STAT,
            coincidence_window: 5,
            settle_skip: 10,
            settle_window: 10,
        }
    }
}

/// Least-squares slope of `y` against uniform unit-index abscissa, together
/// with the slope's standard error (0 for a perfect fit).
fn ls_slope(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxx += dx * dx;
        sxy += dx * (yi - y_mean);
    }
    let slope = sxy / sxx;
    if y.len() < 3 {
        return (slope, 0.0);
    }
    let mut ss_res = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let fit = y_mean + slope * (i as f64 - x_mean);
        ss_res += (yi - fit) * (yi - fit);
    }
    let var = ss_res / (n - 2.0);
    (slope, (var / sxx).sqrt())
}

/// First sample index where the displacement has stopped: the range of the
/// window starting there stays below `eps_mm` while the preceding window
/// still shows motion faster than `min_rate_mm_s`.
pub fn detect_plateau(
    trace: &TelemetryTrace,
    window: usize,
    eps_mm: f64,
    min_rate_mm_s: f64,
) -> Result<Option<usize>> {
    if window < 2 {
        return Err(Error::invalid("plateau window must be >= 2"));
    }
    if window > trace.len() {
        return Err(Error::invalid(format!(
            "plateau window {} exceeds trace length {}",
            window,
            trace.len()
        )));
    }
    let d = trace.displacement();
    for i in window..=trace.len() - window {
        let slice = &d[i..i + window];
        let (min, max) = slice
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if max - min < eps_mm {
            let (slope, _) = ls_slope(&d[i - window..i]);
            let rate = slope * trace.sample_rate();
            if rate.abs() >= min_rate_mm_s {
                return Ok(Some(i));
            }
        }
    }
    Ok(None)
}

/// Locates the torque-slope knee of stopper contact: within the last
/// contiguous run of indices whose post/pre slope ratio of the torque
/// magnitude clears `slope_ratio`, the index where the ratio peaks. Both
/// slopes must be positive (loading) and the post-window slope must clear a
/// t-statistic guard so flat noise cannot trigger. The last run is the
/// physical one: contact is the final steepening of the approach.
pub fn detect_torque_knee(
    trace: &TelemetryTrace,
    pre_window: usize,
    post_window: usize,
    slope_ratio: f64,
) -> Result<Option<usize>> {
    detect_torque_knee_guarded(trace, pre_window, post_window, slope_ratio, KNEE_MIN_T_STAT)
}

pub fn detect_torque_knee_guarded(
    trace: &TelemetryTrace,
    pre_window: usize,
    post_window: usize,
    slope_ratio: f64,
    min_t_stat: f64,
) -> Result<Option<usize>> {
    if pre_window < 2 || post_window < 2 {
        return Err(Error::invalid("knee windows must be >= 2"));
    }
    if pre_window + post_window > trace.len() {
        return Err(Error::invalid(format!(
            "knee windows {}+{} exceed trace length {}",
            pre_window,
            post_window,
            trace.len()
        )));
    }
    let mag: Vec<f64> = trace.torque().iter().map(|t| t.abs()).collect();
    let mut last_run: Option<(usize, f64)> = None;
    let mut in_run = false;
    for i in pre_window..=trace.len() - post_window {
        let (pre, _) = ls_slope(&mag[i - pre_window..i]);
        let (post, post_se) = ls_slope(&mag[i..i + post_window]);
        let significant = post_se == 0.0 || post / post_se >= min_t_stat;
        let candidate = pre > 0.0 && post > 0.0 && post >= slope_ratio * pre && significant;
        if candidate {
            let ratio = post / pre;
            match (&mut last_run, in_run) {
                (Some((idx, best)), true) => {
                    if ratio > *best {
                        *idx = i;
                        *best = ratio;
                    }
                }
                _ => last_run = Some((i, ratio)), // a new run replaces older ones
            }
            in_run = true;
        } else {
            in_run = false;
        }
    }
    Ok(last_run.map(|(i, _)| i))
}

/// Full limit-event detection: a torque knee and a displacement plateau that
/// coincide within the configured window. Returns `None` (with a debug log
/// of the reason) when either signature is missing or they disagree.
pub fn detect_limit_event(
    trace: &TelemetryTrace,
    opts: &DetectOptions,
) -> Result<Option<LimitEvent>> {
    let plateau = detect_plateau(
        trace,
        opts.plateau_window,
        opts.plateau_eps_mm,
        opts.min_motion_rate_mm_s,
    )?;
    let knee = detect_torque_knee_guarded(
        trace,
        opts.knee_pre_window,
        opts.knee_post_window,
        opts.slope_ratio,
        opts.knee_min_t_stat,
    )?;
    let (p, k) = match (plateau, knee) {
        (Some(p), Some(k)) => (p, k),
        (Some(_), None) => {
            log::debug!("plateau without torque knee; no event");
            return Ok(None);
        }
        (None, Some(_)) => {
            log::debug!("torque knee without displacement plateau; no event");
            return Ok(None);
        }
        (None, None) => return Ok(None),
    };
    if p.abs_diff(k) > opts.coincidence_window {
        log::debug!(
            "plateau at {p} and knee at {k} exceed the coincidence window of {}",
            opts.coincidence_window
        );
        return Ok(None);
    }
    let start = k + opts.settle_skip;
    let end = (start + opts.settle_window).min(trace.len());
    if end.saturating_sub(start) < 3 {
        log::debug!("trace ends before the settle window; no event");
        return Ok(None);
    }
    let tau_lim = median(&trace.torque()[start..end]);
    let plateau_displacement = median(&trace.displacement()[start..end]);
    Ok(Some(LimitEvent {
        index: k,
        t_contact: trace.t()[k],
        tau_lim,
        plateau_displacement,
    }))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and unbiased sample standard deviation of the limit torques of a
/// set of repeated trials.
pub fn trigger_stats(events: &[LimitEvent]) -> Result<(f64, f64)> {
    if events.len() < 2 {
        return Err(Error::invalid(
            "trigger statistics need at least two events",
        ));
    }
    let n = events.len() as f64;
    let mean = events.iter().map(|e| e.tau_lim).sum::<f64>() / n;
    let var = events
        .iter()
        .map(|e| (e.tau_lim - mean) * (e.tau_lim - mean))
        .sum::<f64>()
        / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Noise-free ramp-then-plateau displacement with a piecewise-linear
    /// torque knee at `knee_index`.
    fn synthetic(
        n: usize,
        knee_index: usize,
        pre_slope: f64,
        post_slope: f64,
        rate: f64,
    ) -> TelemetryTrace {
        let mut torque = Vec::with_capacity(n);
        let mut disp = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / rate;
            let tk = knee_index as f64 / rate;
            torque.push(if i < knee_index {
                pre_slope * t
            } else {
                pre_slope * tk + post_slope * (t - tk)
            });
            disp.push(if i < knee_index { 21.566 * t } else { 422.0 });
        }
        // Snap the plateau exactly.
        let plateau = disp[knee_index];
        for d in disp.iter_mut().skip(knee_index) {
            *d = plateau;
        }
        TelemetryTrace::from_samples(rate, torque, disp).unwrap()
    }

    #[test]
    fn plateau_found_at_knee() {
        let tr = synthetic(900, 587, 0.01, 0.2, 30.0);
        let p = detect_plateau(&tr, 10, 0.5, 1.0).unwrap().unwrap();
        assert!(p.abs_diff(587) <= 2, "plateau at {p}");
    }

    #[test]
    fn constant_trace_has_no_plateau() {
        let tr =
            TelemetryTrace::from_samples(30.0, vec![0.5; 300], vec![100.0; 300]).unwrap();
        assert!(detect_plateau(&tr, 10, 0.5, 1.0).unwrap().is_none());
    }

    #[test]
    fn pure_ramp_has_no_plateau() {
        let disp: Vec<f64> = (0..300).map(|i| i as f64).collect();
        let tr = TelemetryTrace::from_samples(30.0, vec![0.1; 300], disp).unwrap();
        assert!(detect_plateau(&tr, 10, 0.5, 1.0).unwrap().is_none());
    }

    #[test]
    fn window_longer_than_trace_rejected() {
        let tr = TelemetryTrace::from_samples(30.0, vec![0.0; 5], vec![0.0; 5]).unwrap();
        assert!(detect_plateau(&tr, 6, 0.5, 1.0).is_err());
        assert!(detect_torque_knee(&tr, 4, 4, 5.0).is_err());
    }

    #[test]
    fn knee_located_within_two_samples() {
        let tr = synthetic(900, 587, 0.01, 0.2, 30.0);
        let k = detect_torque_knee(&tr, 15, 15, 5.0).unwrap().unwrap();
        assert!(k.abs_diff(587) <= 2, "knee at {k}");
    }

    #[test]
    fn constant_slope_has_no_knee() {
        let torque: Vec<f64> = (0..600).map(|i| 0.01 * i as f64).collect();
        let disp: Vec<f64> = (0..600).map(|i| i as f64).collect();
        let tr = TelemetryTrace::from_samples(30.0, torque, disp).unwrap();
        assert!(detect_torque_knee(&tr, 15, 15, 5.0).unwrap().is_none());
    }

    #[test]
    fn noisy_flat_torque_no_false_positives() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 0.005).unwrap();
        for seed in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let torque: Vec<f64> = (0..600).map(|_| 0.3 + normal.sample(&mut rng)).collect();
            let disp: Vec<f64> = (0..600).map(|i| i as f64).collect();
            let tr = TelemetryTrace::from_samples(30.0, torque, disp).unwrap();
            assert!(
                detect_torque_knee(&tr, 15, 15, 5.0).unwrap().is_none(),
                "false knee for seed {seed}"
            );
        }
    }

    #[test]
    fn event_requires_coincidence() {
        // Knee at 100 but plateau at 300: no event.
        let rate = 30.0;
        let n = 600;
        let mut torque = Vec::with_capacity(n);
        let mut disp = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / rate;
            torque.push(if i < 100 { 0.01 * t } else { 0.01 * 100.0 / rate + 0.2 * (t - 100.0 / rate) });
            disp.push(if i < 300 { 2.0 * t } else { 2.0 * 300.0 / rate });
        }
        let tr = TelemetryTrace::from_samples(rate, torque, disp).unwrap();
        assert!(detect_limit_event(&tr, &DetectOptions::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn event_on_clean_synthetic_trace() {
        let tr = synthetic(900, 587, 0.01, 0.2, 30.0);
        let ev = detect_limit_event(&tr, &DetectOptions::default())
            .unwrap()
            .expect("event");
        assert!(ev.index.abs_diff(587) <= 2);
        assert_relative_eq!(ev.plateau_displacement, 422.0, epsilon = 1e-9);
        assert!((ev.t_contact - 587.0 / 30.0).abs() <= 2.0 / 30.0);
    }

    #[test]
    fn sign_convention_preserved() {
        // Negative-signed torque traces detect identically; tau keeps sign.
        let tr = synthetic(900, 587, 0.01, 0.2, 30.0);
        let neg = TelemetryTrace::from_samples(
            30.0,
            tr.torque().iter().map(|t| -t).collect(),
            tr.displacement().to_vec(),
        )
        .unwrap();
        let ev_pos = detect_limit_event(&tr, &DetectOptions::default())
            .unwrap()
            .unwrap();
        let ev_neg = detect_limit_event(&neg, &DetectOptions::default())
            .unwrap()
            .unwrap();
        assert_eq!(ev_pos.index, ev_neg.index);
        assert_relative_eq!(ev_pos.tau_lim, -ev_neg.tau_lim, epsilon = 1e-12);
        assert!(ev_neg.tau_lim < 0.0);
    }

    #[test]
    fn shift_equivariance() {
        let tr = synthetic(900, 587, 0.01, 0.2, 30.0);
        let k0 = detect_torque_knee(&tr, 15, 15, 5.0).unwrap().unwrap();
        let p0 = detect_plateau(&tr, 10, 0.5, 1.0).unwrap().unwrap();
        let shift = 37;
        let mut torque = vec![0.0; shift];
        torque.extend_from_slice(tr.torque());
        let mut disp = vec![0.0; shift];
        disp.extend_from_slice(tr.displacement());
        let shifted = TelemetryTrace::from_samples(30.0, torque, disp).unwrap();
        assert_eq!(
            detect_torque_knee(&shifted, 15, 15, 5.0).unwrap().unwrap(),
            k0 + shift
        );
        assert_eq!(
            detect_plateau(&shifted, 10, 0.5, 1.0).unwrap().unwrap(),
            p0 + shift
        );
    }

    #[test]
    fn scale_invariance_of_knee_index() {
        let tr = synthetic(900, 587, 0.01, 0.2, 30.0);
        let k0 = detect_torque_knee(&tr, 15, 15, 5.0).unwrap().unwrap();
        let scaled = TelemetryTrace::from_samples(
            30.0,
            tr.torque().iter().map(|t| 37.5 * t).collect(),
            tr.displacement().to_vec(),
        )
        .unwrap();
        assert_eq!(
            detect_torque_knee(&scaled, 15, 15, 5.0).unwrap().unwrap(),
            k0
        );
    }

    #[test]
    fn trigger_stats_two_point_formula() {
        let mk = |tau| LimitEvent {
            index: 0,
            t_contact: 0.0,
            tau_lim: tau,
            plateau_displacement: 422.0,
        };
        let (mean, std) = trigger_stats(&[mk(1.3), mk(1.5)]).unwrap();
        assert_relative_eq!(mean, 1.4, epsilon = 1e-12);
        assert_relative_eq!(std, 0.1414, epsilon = 1e-3);
        let (_, std_same) = trigger_stats(&[mk(1.4), mk(1.4), mk(1.4)]).unwrap();
        assert!(std_same < 1e-12);
        assert!(trigger_stats(&[mk(1.4)]).is_err());
    }

    #[test]
    fn csv_round_trip_and_line_numbers() {
        let tr = synthetic(40, 20, 0.01, 0.2, 30.0);
        let mut buf = Vec::new();
        tr.to_csv_writer(&mut buf).unwrap();
        let back = TelemetryTrace::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(back.len(), tr.len());
        assert_relative_eq!(back.sample_rate(), 30.0, epsilon = 1e-6);

        let bad = "t_s,torque_Nm,displacement_mm\n0.0,0.1,0.0\n0.0333,oops,1.0\n";
        match TelemetryTrace::from_csv_reader(bad.as_bytes()) {
            Err(Error::CsvParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected csv error, got {other:?}"),
        }
    }
}
