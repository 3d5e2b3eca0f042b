//! Seeded ground-truth generators and brute-force oracles.
//!
//! Everything here is a test fixture: paper-shaped telemetry traces with a
//! planted contact instant, degradation histories with a planted change
//! point, a dense potential-energy grid scan for single-module chains, and a
//! hand-derivable cable-path derivative for a one-hinge configuration. All
//! randomness is ChaCha8 seeded, so identical seeds give bit-identical
//! output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detect::TelemetryTrace;
use crate::error::{Error, Result};
use crate::fatigue::CycleRecord;
use crate::prbm::{ChainConfig, JointState, StiffnessParams};
use crate::statics::StaticModel;

/// Fraction of the limit torque reached just before stopper contact in
/// generated traces. The springs are nearly fully deflected at contact, so
/// the free-motion torque is already a large share of the trigger value.
const KNEE_TORQUE_FRACTION: f64 = 0.75;

/// Samples over which the post-contact torque ramps up to the limit value.
const CONTACT_RAMP_SAMPLES: usize = 8;

// ---------------------------------------------------------------------------
// Degradation history
// ---------------------------------------------------------------------------

/// Shape of a synthetic fatigue-to-failure torque history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegradationProfile {
    /// Healthy end-stop torque at cycle zero (N·m).
    pub tau_start: f64,
    /// Cycle index of the planted slope change.
    pub change_point_n: u64,
    /// Gentle decline before the change point (N·m per cycle, >= 0).
    pub pre_slope: f64,
    /// Steep decline after the change point (N·m per cycle, >= 0).
    pub post_slope: f64,
    /// Post-fracture torque floor (N·m).
    pub fracture_tau: f64,
    /// Per-cycle Gaussian noise standard deviation (N·m).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationProfile {
    fn default() -> Self {
        DegradationProfile {
            tau_start: 1.4,
            change_point_n: 9230,
            // 1.4 -> 0.9 over the first 9230 cycles, then 0.9 -> 0.6 within
            // roughly 600 cycles before the clamp.
            pre_slope: 0.5 / 9230.0,
            post_slope: 5.0e-4,
            fracture_tau: 0.6,
            noise_sigma: 0.004,
            seed: 7,
        }
    }
}

impl DegradationProfile {
    fn validate(&self) -> Result<()> {
        if !(self.tau_start > self.fracture_tau) {
            return Err(Error::invalid(format!(
                "tau_start {} must exceed fracture_tau {}",
                self.tau_start, self.fracture_tau
            )));
        }
        if self.pre_slope < 0.0 || self.post_slope < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::invalid(
                "slopes and noise_sigma must be nonnegative",
            ));
        }
        Ok(())
    }

    /// Noise-free torque at cycle `n`.
    pub fn mean_tau(&self, n: u64) -> f64 {
        let n = n as f64;
        let cp = self.change_point_n as f64;
        let tau = if n <= cp {
            self.tau_start - self.pre_slope * n
        } else {
            self.tau_start - self.pre_slope * cp - self.post_slope * (n - cp)
        };
        tau.max(self.fracture_tau)
    }
}

/// Generates one record per cycle `0..=n_cycles` with the planted piecewise
/// decline and clamp.
pub fn generate_degradation_series(
    profile: &DegradationProfile,
    n_cycles: u64,
) -> Result<Vec<CycleRecord>> {
    profile.validate()?;
    if n_cycles <= profile.change_point_n {
        return Err(Error::invalid(format!(
            "n_cycles {} must exceed the change point {}",
            n_cycles, profile.change_point_n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let normal = Normal::new(0.0, profile.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::with_capacity(n_cycles as usize + 1);
    for n in 0..=n_cycles {
        let noise = if profile.noise_sigma > 0.0 {
            normal.sample(&mut rng)
        } else {
            0.0
        };
        out.push(CycleRecord {
            n,
            tau_lim: profile.mean_tau(n) + noise,
            k_hat: None,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Limit-event telemetry
// ---------------------------------------------------------------------------

/// Generates a paper-shaped limit-approach trace: displacement ramps
/// linearly and plateaus at contact; torque ramps gently, then steepens at
/// contact and settles at the limit value.
///
/// `noise` is the Gaussian standard deviation applied to the torque channel
/// (motor current sensing); it also perturbs the trace's own limit torque to
/// model trial-to-trial trigger repeatability. Displacement comes from
/// encoders and is modelled noise-free. With `contact_t >= duration` the
/// trace never reaches the stopper.
#[allow(clippy::too_many_arguments)]
pub fn generate_limit_trace(
    tau_lim: f64,
    plateau_disp_mm: f64,
    contact_t: f64,
    duration: f64,
    sample_rate: f64,
    noise: f64,
    seed: u64,
) -> Result<TelemetryTrace> {
    if !(contact_t > 0.0) || !(duration > 0.0) || !(sample_rate > 0.0) {
        return Err(Error::invalid(
            "contact_t, duration and sample_rate must be positive",
        ));
    }
    if noise < 0.0 {
        return Err(Error::invalid("noise must be nonnegative"));
    }
    let n = (duration * sample_rate).round() as usize;
    if n < 2 {
        return Err(Error::invalid("duration too short for two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut draw = |active: bool| if active { normal.sample(&mut rng) } else { 0.0 };

    // Trial-to-trial repeatability of the trigger level itself.
    let tau_eff = tau_lim + draw(noise > 0.0);
    let knee_tau = KNEE_TORQUE_FRACTION * tau_eff;
    let contact_index = (contact_t * sample_rate).round() as usize;

    let mut torque = Vec::with_capacity(n);
    let mut displacement = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sample_rate;
        let d = plateau_disp_mm * (t / contact_t).min(1.0);
        displacement.push(d);
        let mean = if i < contact_index {
            knee_tau * t / contact_t
        } else {
            let ramp = (i - contact_index) as f64 / CONTACT_RAMP_SAMPLES as f64;
            knee_tau + (tau_eff - knee_tau) * ramp.min(1.0)
        };
        torque.push(mean + draw(noise > 0.0));
    }
    TelemetryTrace::from_samples(sample_rate, torque, displacement)
}

// ---------------------------------------------------------------------------
// Brute-force equilibrium oracle
// ---------------------------------------------------------------------------

/// Grid resolution for [`brute_force_equilibrium`].
#[derive(Clone, Copy, Debug)]
pub struct GridSpec {
    pub bend_points: usize,
    pub compression_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            bend_points: 200,
            compression_points: 200,
        }
    }
}

/// Argmin of the dense scan.
#[derive(Clone, Debug)]
pub struct GridEquilibrium {
    pub q_min: JointState,
    /// Module bend angle at the argmin (rad).
    pub bend: f64,
    /// Total module compression at the argmin (m, negative shortens).
    pub compression: f64,
    pub energy: f64,
    /// Cell sizes `(d_bend, d_compression)`.
    pub cell: (f64, f64),
    pub on_bend_boundary: bool,
}

/// Dense potential-energy scan for a single-module chain over the
/// `(bend angle, total compression)` box, with the bend spread equally over
/// the six joints and the compression over the five segments. Respects the
/// limit-angle constraint by construction of the box.
pub fn brute_force_equilibrium(
    cfg: &ChainConfig,
    params: &StiffnessParams,
    u_c: [f64; 2],
    grid: GridSpec,
    tip_force: Option<nalgebra::Vector3<f64>>,
) -> Result<GridEquilibrium> {
    cfg.validate()?;
    params.validate_positive(cfg)?;
    if cfg.n_modules != 1 {
        return Err(Error::invalid(
            "the brute-force oracle only handles single-module chains",
        ));
    }
    if grid.bend_points < 50 || grid.compression_points < 50 {
        log::warn!(
            "brute-force grid {}x{} is coarse; argmin localisation may be poor",
            grid.bend_points,
            grid.compression_points
        );
    }
    let model = StaticModel {
        cfg,
        params,
        tensions: u_c,
        tip_force,
    };
    let nb = grid.bend_points.max(2);
    let nc = grid.compression_points.max(2);
    let bend_max = cfg.limit_angle;
    let comp_max = 5.0 * cfg.max_compression;
    let db = 2.0 * bend_max / (nb - 1) as f64;
    let dc = 2.0 * comp_max / (nc - 1) as f64;

    // Exact energy ties happen on the springless hinge-play plateau around
    // the origin; break them towards the least-deformed node, matching the
    // solver's zero initial guess.
    let mut best = (f64::INFINITY, f64::INFINITY, 0.0, 0.0);
    let mut q = JointState::zero(1);
    for ib in 0..nb {
        let bend = -bend_max + db * ib as f64;
        let dist = crate::statics::bend_distribution(cfg, bend);
        q.theta.copy_from_slice(&dist);
        for ic in 0..nc {
            let comp = -comp_max + dc * ic as f64;
            for e in q.ell.iter_mut() {
                *e = comp / 5.0;
            }
            let en = model.energy(&q);
            let dist2 = bend * bend + comp * comp;
            if en < best.0 || (en == best.0 && dist2 < best.1) {
                best = (en, dist2, bend, comp);
            }
        }
    }
    let (energy, _, bend, compression) = best;
    let mut q_min = JointState::zero(1);
    q_min
        .theta
        .copy_from_slice(&crate::statics::bend_distribution(cfg, bend));
    q_min.ell.iter_mut().for_each(|e| *e = compression / 5.0);
    Ok(GridEquilibrium {
        q_min,
        bend,
        compression,
        energy,
        cell: (db, dc),
        on_bend_boundary: (bend.abs() - bend_max).abs() < 0.5 * db,
    })
}

// ---------------------------------------------------------------------------
// Hand-derivable cable-path oracle
// ---------------------------------------------------------------------------

/// Closed-form derivative of cable 0's routed path length with respect to
/// the proximal free hinge of a single-module chain, all other coordinates
/// held at zero.
///
/// With only that hinge rotated, the whole module is a rigid body: the site
/// sits at `R(θ)·(r, 0, z_s)` and the tip anchor at `R(θ)·(r, 0, z_t)`, so
/// only the anchor→site segment changes length and the derivative is
/// `(S−A)·(dS/dθ)/‖S−A‖` with `dS/dθ = (S_z, 0, −S_x)`.
pub fn single_hinge_path_derivative(cfg: &ChainConfig, theta: f64) -> Result<f64> {
    if cfg.n_modules != 1 {
        return Err(Error::invalid("the one-hinge oracle needs a single module"));
    }
    let a0 = cfg.segment_rest_length();
    let site = cfg.cable_sites[0];
    let r = site.lateral;
    let z_s = 2.0 * a0 + site.axial;
    let (s, c) = (theta.sin(), theta.cos());
    // S = R_y(θ)·(r, 0, z_s), anchor A = (r, 0, 0).
    let sx = c * r + s * z_s;
    let sz = -s * r + c * z_s;
    let dx = sx - r;
    let dz = sz;
    let norm = (dx * dx + dz * dz).sqrt();
    if norm == 0.0 {
        return Err(Error::invalid("site coincides with the anchor"));
    }
    // dS/dθ = (S_z, 0, −S_x).
    Ok((dx * sz + dz * (-sx)) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect;
    use crate::prbm::cable_jacobian;
    use approx::assert_relative_eq;

    #[test]
    fn same_seed_bit_identical() {
        let p = DegradationProfile::default();
        let a = generate_degradation_series(&p, 10_000).unwrap();
        let b = generate_degradation_series(&p, 10_000).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.tau_lim.to_bits(), y.tau_lim.to_bits());
        }
        let t1 = generate_limit_trace(1.4, 422.0, 19.57, 30.0, 30.0, 0.02, 3).unwrap();
        let t2 = generate_limit_trace(1.4, 422.0, 19.57, 30.0, 30.0, 0.02, 3).unwrap();
        assert_eq!(t1.torque(), t2.torque());
    }

    #[test]
    fn noise_free_series_is_piecewise_linear() {
        let profile = DegradationProfile {
            noise_sigma: 0.0,
            ..DegradationProfile::default()
        };
        let series = generate_degradation_series(&profile, 10_000).unwrap();
        // Exact piecewise linearity: second differences vanish away from the
        // change point and the clamp onset.
        for w in series.windows(3) {
            let d2 = w[0].tau_lim - 2.0 * w[1].tau_lim + w[2].tau_lim;
            let n = w[1].n;
            let near_kink = n.abs_diff(profile.change_point_n) <= 1;
            let near_clamp = (profile.mean_tau(n) - profile.fracture_tau).abs() < 1e-3;
            if !near_kink && !near_clamp {
                assert!(d2.abs() < 1e-12, "cycle {n}: d2 = {d2:.3e}");
            }
        }
        // Trailing records all sit on the fracture clamp.
        assert_eq!(series.last().unwrap().tau_lim, 0.6);
    }

    #[test]
    fn inconsistent_profile_rejected() {
        let p = DegradationProfile {
            tau_start: 0.5,
            ..DegradationProfile::default()
        };
        assert!(generate_degradation_series(&p, 10_000).is_err());
        assert!(
            generate_degradation_series(&DegradationProfile::default(), 5000).is_err(),
            "series must extend past the change point"
        );
    }

    #[test]
    fn trace_satisfies_invariants_and_shape() {
        let tr = generate_limit_trace(1.4, 422.0, 19.57, 30.0, 30.0, 0.0, 0).unwrap();
        assert_eq!(tr.len(), 900);
        // Uniform 30 Hz spacing.
        let t = tr.t();
        for w in t.windows(2) {
            assert_relative_eq!(w[1] - w[0], 1.0 / 30.0, epsilon = 1e-9);
        }
        // Plateau holds exactly at 422 mm after contact.
        assert_eq!(tr.displacement()[899], 422.0);
        assert_eq!(tr.displacement()[700], 422.0);
        // Torque settles at the limit value.
        assert_relative_eq!(tr.torque()[899], 1.4, epsilon = 1e-12);
    }

    #[test]
    fn no_contact_trace_has_no_event() {
        let tr = generate_limit_trace(1.4, 422.0, 40.0, 30.0, 30.0, 0.0, 0).unwrap();
        let ev = detect::detect_limit_event(&tr, &detect::DetectOptions::default()).unwrap();
        assert!(ev.is_none());
    }

    #[test]
    fn grid_oracle_origin_when_unloaded() {
        let mut cfg = ChainConfig::single_module();
        cfg.gravity = nalgebra::Vector3::zeros();
        let params = StiffnessParams::constant(6e4, 5e4, 12.0);
        let g = brute_force_equilibrium(
            &cfg,
            &params,
            [0.0, 0.0],
            GridSpec {
                bend_points: 101,
                compression_points: 101,
            },
            None,
        )
        .unwrap();
        // Odd point counts place a node at the origin up to rounding.
        assert!(g.bend.abs() < 1e-12);
        assert!(g.compression.abs() < 1e-12);
    }

    #[test]
    fn grid_oracle_halving_refines_argmin() {
        let mut cfg = ChainConfig::single_module();
        cfg.gravity = nalgebra::Vector3::zeros();
        let params = StiffnessParams::constant(6e4, 5e4, 12.0);
        let coarse = brute_force_equilibrium(
            &cfg,
            &params,
            [60.0, 0.0],
            GridSpec {
                bend_points: 101,
                compression_points: 101,
            },
            None,
        )
        .unwrap();
        let fine = brute_force_equilibrium(
            &cfg,
            &params,
            [60.0, 0.0],
            GridSpec {
                bend_points: 201,
                compression_points: 201,
            },
            None,
        )
        .unwrap();
        assert!((fine.bend - coarse.bend).abs() <= coarse.cell.0);
        assert!((fine.compression - coarse.compression).abs() <= coarse.cell.1);
    }

    #[test]
    fn one_hinge_derivative_matches_finite_difference_jacobian() {
        let mut cfg = ChainConfig::single_module();
        cfg.gravity = nalgebra::Vector3::zeros();
        cfg.hinge_play = cfg.limit_angle / 2.0;
        for theta in [0.05f64, 0.2, 0.35] {
            let mut q = JointState::zero(1);
            q.theta[0] = theta;
            let rows = cable_jacobian(&cfg, &q, 1e-7).unwrap();
            let analytic = single_hinge_path_derivative(&cfg, theta).unwrap();
            // The jacobian row is the reel-in gradient, minus the path
            // length derivative.
            assert_relative_eq!(rows[0][0], -analytic, epsilon = 1e-6, max_relative = 1e-5);
        }
    }
}
