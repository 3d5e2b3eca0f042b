//! Stiffness identification from the recorded end-stop torque, the
//! equivalent scalar stiffness, and the runtime torque→stiffness surrogate.
//!
//! Identification recovers the three joint-stiffness values at the limit
//! displacement from a single recorded actuation: the motor torque `u_c*`
//! measured with the chain resting on its stoppers. The recorded torque is
//! applied to the simulated chain and a derivative-free search adjusts
//! `(K_p1, K_p2, K_r2)` until the resulting static state sits at the known
//! geometric limit pose. The objective combines the cable-site mismatch
//! against that pose (what the bend and compression distribution of the
//! chain makes observable) with a penalty on the residual of the static
//! balance at the limit pose, the constraint of the identification problem.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, NmOptions};
use crate::prbm::{ChainConfig, JointState, Kinematics, StiffnessParams};
use crate::statics::{self, SolveOptions};

/// Penalty objective for candidates whose inner equilibrium solve fails.
const SOLVE_FAILURE_PENALTY: f64 = 1e12;

// ---------------------------------------------------------------------------
// Equivalent scalar stiffness
// ---------------------------------------------------------------------------

/// Root-mean-square of the three joint stiffnesses with `K_r2` normalised to
/// N/m through the characteristic radius: `K̂ = sqrt((K_p1² + K_p2² +
/// (K_r2/r²)²)/3)`.
pub fn equivalent_stiffness(k_p1: f64, k_p2: f64, k_r2: f64, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::invalid(format!(
            "characteristic radius must be positive, got {r}"
        )));
    }
    let kr = k_r2 / (r * r);
    Ok(((k_p1 * k_p1 + k_p2 * k_p2 + kr * kr) / 3.0).sqrt())
}

// ---------------------------------------------------------------------------
// Monotone surrogate K̂ ≈ f(τ_lim)
// ---------------------------------------------------------------------------

/// A feature point of the cycle history: the recorded limit torque and the
/// offline stiffness estimate at cycle `n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub n: u64,
    pub tau_lim: f64,
    pub k_hat: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateKind {
    MonotonePiecewiseLinear,
}

/// Monotone piecewise-linear map from limit torque to equivalent stiffness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFit {
    /// `(tau_lim, k_hat)` knots, strictly increasing in both coordinates.
    pub knots: Vec<(f64, f64)>,
    /// Torque range covered by the fitted data; queries outside it are
    /// flagged as extrapolation.
    pub tau_range: (f64, f64),
    pub kind: SurrogateKind,
}

impl SurrogateFit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fit: SurrogateFit = serde_json::from_str(text)?;
        if fit.knots.len() < 2 {
            return Err(Error::Fit("surrogate needs at least 2 knots".into()));
        }
        for w in fit.knots.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::Fit(
                    "surrogate knots must increase strictly in both coordinates".into(),
                ));
            }
        }
        Ok(fit)
    }
}

/// Fits the monotone surrogate by isotonic projection
/// (pool-adjacent-violators) of `k_hat` against `tau_lim`, then places one
/// knot per pooled block at its torque centroid.
pub fn fit_surrogate(points: &[FeaturePoint]) -> Result<SurrogateFit> {
    if points.len() < 2 {
        return Err(Error::Fit("need at least 2 feature points".into()));
    }
    let mut data: Vec<(f64, f64)> = points.iter().map(|p| (p.tau_lim, p.k_hat)).collect();
    data.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));

    // Merge duplicate torques into weighted means.
    let mut merged: Vec<(f64, f64, f64)> = Vec::with_capacity(data.len()); // (tau, mean k, weight)
    for (tau, k) in data {
        match merged.last_mut() {
            Some((t, mk, w)) if *t == tau => {
                *mk = (*mk * *w + k) / (*w + 1.0);
                *w += 1.0;
            }
            _ => merged.push((tau, k, 1.0)),
        }
    }
    if merged.len() < 2 {
        return Err(Error::Fit(
            "need at least 2 distinct torque values".into(),
        ));
    }

    // Pool-adjacent-violators for an increasing fit; each block keeps the
    // weighted torque centroid of its members.
    struct Block {
        tau_sum: f64,
        k_mean: f64,
        weight: f64,
    }
    let mut blocks: Vec<Block> = Vec::with_capacity(merged.len());
    for (tau, k, w) in merged.iter() {
        blocks.push(Block {
            tau_sum: tau * w,
            k_mean: *k,
            weight: *w,
        });
        while blocks.len() > 1 {
            let last = blocks.len() - 1;
            if blocks[last - 1].k_mean > blocks[last].k_mean {
                let b = blocks.pop().unwrap();
                let a = blocks.last_mut().unwrap();
                let w_total = a.weight + b.weight;
                a.k_mean = (a.k_mean * a.weight + b.k_mean * b.weight) / w_total;
                a.tau_sum += b.tau_sum;
                a.weight = w_total;
            } else {
                break;
            }
        }
    }
    if blocks.len() < 2 {
        return Err(Error::Fit(
            "isotonic projection pooled all points; the stiffness values carry no monotone trend"
                .into(),
        ));
    }
    let knots: Vec<(f64, f64)> = blocks
        .iter()
        .map(|b| (b.tau_sum / b.weight, b.k_mean))
        .collect();
    Ok(SurrogateFit {
        tau_range: (merged[0].0, merged[merged.len() - 1].0),
        knots,
        kind: SurrogateKind::MonotonePiecewiseLinear,
    })
}

/// A surrogate evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub k_hat: f64,
    /// Query fell outside the fitted torque range and was clamped.
    pub extrapolated: bool,
}

/// Piecewise-linear evaluation of the surrogate, clamped to the end knots;
/// O(log #knots).
pub fn predict_stiffness(fit: &SurrogateFit, tau: f64) -> Prediction {
    let extrapolated = tau < fit.tau_range.0 || tau > fit.tau_range.1;
    let knots = &fit.knots;
    if tau <= knots[0].0 {
        return Prediction {
            k_hat: knots[0].1,
            extrapolated: extrapolated || tau < knots[0].0,
        };
    }
    if tau >= knots[knots.len() - 1].0 {
        return Prediction {
            k_hat: knots[knots.len() - 1].1,
            extrapolated: extrapolated || tau > knots[knots.len() - 1].0,
        };
    }
    let hi = knots.partition_point(|k| k.0 < tau);
    let (t0, k0) = knots[hi - 1];
    let (t1, k1) = knots[hi];
    Prediction {
        k_hat: k0 + (k1 - k0) * (tau - t0) / (t1 - t0),
        extrapolated,
    }
}

// ---------------------------------------------------------------------------
// Identification
// ---------------------------------------------------------------------------

/// Options for [`identify`].
#[derive(Clone, Debug)]
pub struct IdentOptions {
    /// Search bounds on each stiffness scalar, SI units; wide but excludes
    /// degenerate zero stiffness.
    pub bounds: (f64, f64),
    /// Initial guess `(K_p1, K_p2, K_r2)`; defaults to the calibrated
    /// healthy profile scaled by the torque ratio.
    pub init: Option<[f64; 3]>,
    /// Initial simplex edge in log10 stiffness units.
    pub simplex_scale: f64,
    /// Outer simplex iteration budget.
    pub max_iterations: usize,
    /// Weight of the limit-torque consistency penalty: a 1 N tension
    /// mismatch costs as much as `sqrt(torque_weight)` metres of site
    /// mismatch. Units m²/N².
    pub torque_weight: f64,
    /// Inner equilibrium solver settings.
    pub solve: SolveOptions,
}

impl Default for IdentOptions {
    fn default() -> Self {
        IdentOptions {
            bounds: (1.0, 1e6),
            init: None,
            simplex_scale: 0.15,
            max_iterations: 300,
            torque_weight: 1e-6,
            solve: SolveOptions {
                max_iterations: 2000,
                ..SolveOptions::default()
            },
        }
    }
}

/// Identified stiffness values at the limit displacement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentResult {
    pub k_p1: f64,
    pub k_p2: f64,
    pub k_r2: f64,
    /// Squared cable-site mismatch against the geometric limit pose at the
    /// identified optimum (m²).
    pub objective_value: f64,
    /// Equivalent scalar stiffness of the identified triple.
    pub k_hat: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// The three stiffness polynomials evaluated at the limit-pose
/// displacements: what a single end-stop measurement makes observable.
pub fn limit_scalars(cfg: &ChainConfig, params: &StiffnessParams) -> Result<[f64; 3]> {
    let q_star = statics::limit_pose(cfg)?;
    let ell_star = q_star.ell[0];
    let theta_star = q_star.theta[2];
    Ok([
        params.kp1(ell_star),
        params.kp2(ell_star),
        params.kr2(theta_star),
    ])
}

/// Recovers `(K_p1, K_p2, K_r2)` from a recorded end-stop torque pair
/// (N·m at the motor). Nested optimization: the outer simplex proposes a
/// stiffness triple, the inner solver computes the equilibrium under the
/// recorded torque, and the objective measures how far that state is from
/// the geometric limit pose.
pub fn identify(cfg: &ChainConfig, u_c_star: [f64; 2], opts: &IdentOptions) -> Result<IdentResult> {
    cfg.validate()?;
    if !u_c_star.iter().all(|t| t.is_finite()) {
        return Err(Error::invalid("end-stop torques must be finite"));
    }
    let (lo, hi) = opts.bounds;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::invalid("bounds must satisfy 0 < lo < hi"));
    }

    let pulled = if u_c_star[1].abs() > u_c_star[0].abs() { 1 } else { 0 };
    let tensions = [
        u_c_star[0].abs() / cfg.pulley_radius,
        u_c_star[1].abs() / cfg.pulley_radius,
    ];
    let tension_star = tensions[pulled];

    // Reference: the geometric limit pose bent towards the pulled cable.
    let mut q_ref = statics::limit_pose(cfg)?;
    if pulled == 1 {
        q_ref.theta.iter_mut().for_each(|t| *t = -*t);
    }
    let ref_sites = Kinematics::compute(cfg, &q_ref).sites[pulled].clone();

    let init = opts.init.unwrap_or_else(|| {
        let healthy = StiffnessParams::default_healthy();
        let base = limit_scalars(cfg, &healthy).unwrap_or([5e4, 5e4, 10.0]);
        let scale = (u_c_star[pulled].abs() / 1.4).clamp(0.05, 20.0);
        [base[0] * scale, base[1] * scale, base[2] * scale]
    });

    // Degenerate input: nothing pulls, nothing is observable.
    if tension_star < 1e-9 {
        return Ok(IdentResult {
            k_p1: init[0],
            k_p2: init[1],
            k_r2: init[2],
            objective_value: f64::INFINITY,
            k_hat: equivalent_stiffness(init[0], init[1], init[2], cfg.char_radius)?,
            converged: false,
            iterations: 0,
        });
    }

    let site_mismatch = |k: &[f64]| -> Result<f64> {
        let params = StiffnessParams::constant(k[0], k[1], k[2]);
        let eq = statics::solve_equilibrium(cfg, &params, tensions, &opts.solve)?;
        let kin = Kinematics::compute(cfg, &eq.q_eq);
        let g: f64 = kin.sites[pulled]
            .iter()
            .zip(ref_sites.iter())
            .map(|(s, r)| (s - r).norm())
            .sum();
        Ok(g)
    };

    let objective = |x: &[f64]| -> f64 {
        let k: Vec<f64> = x.iter().map(|v| 10f64.powf(*v)).collect();
        let g = match site_mismatch(&k) {
            Ok(g) => g,
            Err(_) => return SOLVE_FAILURE_PENALTY,
        };
        let params = StiffnessParams::constant(k[0], k[1], k[2]);
        let hold = match statics::hold_tension(cfg, &params) {
            Ok(sol) => sol.tension,
            Err(_) => return SOLVE_FAILURE_PENALTY,
        };
        let dt = hold - tension_star;
        g * g + opts.torque_weight * dt * dt
    };

    let x0: Vec<f64> = init
        .iter()
        .map(|k| k.clamp(lo, hi).log10())
        .collect();
    let nm = optim::minimize(
        objective,
        &x0,
        &[opts.simplex_scale; 3],
        &[lo.log10(); 3],
        &[hi.log10(); 3],
        &NmOptions {
            max_iters: opts.max_iterations,
            xtol: 1e-7,
            ftol: 1e-18,
        },
    );

    let k: Vec<f64> = nm.x.iter().map(|v| 10f64.powf(*v)).collect();
    let g = site_mismatch(&k).unwrap_or(f64::INFINITY);
    let interior = k
        .iter()
        .all(|&v| v > lo * 1.01 && v < hi * 0.99);
    let converged = nm.converged && g.is_finite() && nm.fx < SOLVE_FAILURE_PENALTY && interior;
    Ok(IdentResult {
        k_p1: k[0],
        k_p2: k[1],
        k_r2: k[2],
        objective_value: g * g,
        k_hat: equivalent_stiffness(k[0], k[1], k[2], cfg.char_radius)?,
        converged,
        iterations: nm.iterations,
    })
}
