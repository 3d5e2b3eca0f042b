//! Quasi-static equilibrium of the chain under cable tension, gravity and
//! unilateral stopper contact.
//!
//! Equilibria are found by minimising the total potential energy
//!
//! ```text
//! Π(q) = E_elastic(q) + E_gravity(q) + Σ_k T_k λ_k(q) + E_tip_load(q)
//! ```
//!
//! subject to the per-module stopper constraint `|bend_m(q)| ≤ limit_angle`,
//! the hinge travel boxes `|θ_free| ≤ hinge_play` and the fatigue-safe box
//! `|ell_i| ≤ max_compression`, where `λ_k` is the routed path length of
//! cable `k` and `T_k ≥ 0` its tension. The stationarity conditions of this
//! program are exactly the static reduction of the chain dynamics,
//! `G(q) + K(q)q = H_cᵀu_c + H_eᵀu_e` with `u_e ≥ 0` recovered from the
//! active stopper constraints (hinges on their travel stops additionally
//! carry a nonnegative seat reaction).
//!
//! The minimiser is a projected, diagonally preconditioned descent with a
//! monotone backtracking line search. Constraint projection is exact: the
//! bend limit is a half-space per module in the rotational block and the
//! compression bound is a per-coordinate box.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prbm::{
    elastic_energy, stiffness_matrix, ChainConfig, GeneralizedForces, JointState, Kinematics,
    StiffnessParams, PRIS_PER_MODULE, REV_PER_MODULE, SEGMENTS_PER_MODULE,
};

/// Tolerance below which a module counts as resting on its stopper.
const ACTIVE_GAP_TOL: f64 = 1e-9;

/// Options for [`solve_equilibrium`].
#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Convergence tolerance on the Euclidean projected-gradient norm
    /// (mixed N / N·m units).
    pub tol: f64,
    pub max_iterations: usize,
    /// Optional warm start; the default initial guess is `q = 0` so repeated
    /// solves are bit-deterministic.
    pub warm_start: Option<JointState>,
    /// Dead load applied at the tip connector (N, world frame).
    pub tip_force: Option<Vector3<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iterations: 500,
            warm_start: None,
            tip_force: None,
        }
    }
}

/// Converged static state of the chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub q_eq: JointState,
    /// Euclidean projected-gradient norm at the returned iterate.
    pub residual_norm: f64,
    /// Stopper normal force per module (N, nonnegative): the contact torque
    /// divided by the stopper contact radius `l_t / 2`.
    pub contact_forces: Vec<f64>,
    /// Contact torque multiplier per module (N·m, nonnegative), conjugate to
    /// the module bend angle.
    pub contact_torques: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Total potential energy at the returned iterate (J).
    pub energy: f64,
}

/// Potential-energy model shared by the solver, the residual and the
/// brute-force oracle.
pub(crate) struct StaticModel<'a> {
    pub cfg: &'a ChainConfig,
    pub params: &'a StiffnessParams,
    pub tensions: [f64; 2],
    pub tip_force: Option<Vector3<f64>>,
}

impl<'a> StaticModel<'a> {
    pub fn energy(&self, q: &JointState) -> f64 {
        let kin = Kinematics::compute(self.cfg, q);
        let mut e = elastic_energy(self.params, q);
        e += kin.accumulate_gravity(self.cfg, None);
        for cable in 0..2 {
            if self.tensions[cable] != 0.0 {
                e += self.tensions[cable] * kin.cable_path_length(cable);
            }
        }
        if let Some(f) = self.tip_force {
            e += kin.accumulate_tip_force(f, None);
        }
        e
    }

    /// Energy and gradient in one kinematics pass.
    pub fn energy_and_gradient(&self, q: &JointState, grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let kin = Kinematics::compute(self.cfg, q);
        // Elastic part: gradient is the secant force K(q)q.
        let k = stiffness_matrix(self.params, q).expect("stiffness validated before solving");
        let packed = q.packed();
        for (i, (kd, x)) in k.diagonal().iter().zip(packed.iter()).enumerate() {
            grad[i] = kd * x;
        }
        let mut e = elastic_energy(self.params, q);
        e += kin.accumulate_gravity(self.cfg, Some(grad));
        for cable in 0..2 {
            if self.tensions[cable] != 0.0 {
                e += self.tensions[cable] * kin.cable_path_length(cable);
                kin.accumulate_path_length_gradient(cable, self.tensions[cable], grad);
            }
        }
        if let Some(f) = self.tip_force {
            e += kin.accumulate_tip_force(f, Some(grad));
        }
        e
    }
}

// ---------------------------------------------------------------------------
// Constraint projection
// ---------------------------------------------------------------------------

/// Exact projection of one module's rotational block onto
/// `{|θ_0|, |θ_1| ≤ play} ∩ {|Σθ| ≤ alpha}` in the metric `diag(1/m_inv)`.
///
/// KKT form: `θ_i = clip(z_i − μ·m_inv_i)` with the clip acting on the two
/// hinge coordinates only, and the scalar `μ` chosen so the block sum meets
/// the violated bound. The sum is strictly decreasing in `μ` (four
/// coordinates are never clipped), so bisection converges unconditionally.
fn project_theta_block(z: &mut [f64], m_inv: &[f64], play: f64, alpha: f64) {
    debug_assert_eq!(z.len(), REV_PER_MODULE);
    let clip = |v: f64| v.clamp(-play, play);
    let eval = |mu: f64| -> f64 {
        let mut s = 0.0;
        for i in 0..REV_PER_MODULE {
            let v = z[i] - mu * m_inv[i];
            s += if i < 2 { clip(v) } else { v };
        }
        s
    };
    let s0 = eval(0.0);
    if s0.abs() <= alpha {
        z[0] = clip(z[0]);
        z[1] = clip(z[1]);
        return;
    }
    let target = alpha * s0.signum();
    // The unclipped coordinates alone guarantee |h'(μ)| >= Σ m_inv[2..],
    // which brackets the root.
    let rate: f64 = m_inv[2..].iter().sum();
    let mut lo = 0.0f64;
    let mut hi = (s0 - target) / rate;
    if hi < lo {
        std::mem::swap(&mut lo, &mut hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if (eval(mid) - target) * (s0 - target) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mu = 0.5 * (lo + hi);
    for i in 0..REV_PER_MODULE {
        let v = z[i] - mu * m_inv[i];
        z[i] = if i < 2 { clip(v) } else { v };
    }
}

/// Projection onto the feasible set in the metric `diag(1/m_inv)`: hinge
/// boxes, per-module bend slabs and the compression box. Pass unit weights
/// for the Euclidean projection. Exact; blocks are independent.
fn project_weighted(cfg: &ChainConfig, x: &mut [f64], m_inv: &[f64]) {
    let nr = cfg.n_rev();
    for m in 0..cfg.n_modules {
        let idx = m * REV_PER_MODULE;
        project_theta_block(
            &mut x[idx..idx + REV_PER_MODULE],
            &m_inv[idx..idx + REV_PER_MODULE],
            cfg.hinge_play,
            cfg.limit_angle,
        );
    }
    let cmax = cfg.max_compression;
    for e in x[nr..].iter_mut() {
        *e = e.clamp(-cmax, cmax);
    }
}

fn project(cfg: &ChainConfig, x: &mut [f64]) {
    let ones = vec![1.0; x.len()];
    project_weighted(cfg, x, &ones);
}

/// Euclidean projected-gradient norm at `x` for the gradient `g`.
fn projected_gradient_norm(cfg: &ChainConfig, x: &[f64], g: &[f64]) -> f64 {
    let mut trial: Vec<f64> = x.iter().zip(g.iter()).map(|(xi, gi)| xi - gi).collect();
    project(cfg, &mut trial);
    trial
        .iter()
        .zip(x.iter())
        .map(|(t, xi)| (t - xi) * (t - xi))
        .sum::<f64>()
        .sqrt()
}

/// Diagonal preconditioner: stiffness at rest plus a tension-geometry scale
/// so the free hinges and the compliant joints step on comparable footing.
fn preconditioner(cfg: &ChainConfig, params: &StiffnessParams, tensions: [f64; 2]) -> Vec<f64> {
    let t_sum = tensions[0].abs() + tensions[1].abs();
    let geom_theta = (t_sum * cfg.shaft_spacing).max(1e-3);
    let geom_ell = (t_sum / cfg.shaft_spacing).max(1e-3);
    let mut m = vec![0.0; cfg.dof()];
    let nr = cfg.n_rev();
    for i in 0..nr {
        let slot = i % REV_PER_MODULE;
        let k0 = if slot < 2 { 0.0 } else { params.kr2(0.0) };
        m[i] = k0 + geom_theta;
    }
    for i in 0..cfg.n_pris() {
        let slot = i % PRIS_PER_MODULE;
        let k0 = if slot < 4 {
            params.kp1(0.0)
        } else {
            params.kp2(0.0)
        };
        m[nr + i] = k0 + geom_ell;
    }
    m
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Static force residual `G(q) + K(q)q − H_cᵀu_c − H_eᵀu_e`.
///
/// `u_c` are cable tensions (N) and `u_e` per-module stopper contact torques
/// (N·m, one per module). The gap of module `m` is `limit_angle − |bend_m|`,
/// so the contact row carries `−sign(bend_m)` on the module's rotational
/// DOFs.
pub fn static_residual(
    cfg: &ChainConfig,
    params: &StiffnessParams,
    q: &JointState,
    u_c: [f64; 2],
    u_e: &[f64],
) -> Result<GeneralizedForces> {
    cfg.validate()?;
    cfg.check_state(q)?;
    if u_e.len() != cfg.n_modules {
        return Err(Error::invalid(format!(
            "u_e has {} entries for {} modules",
            u_e.len(),
            cfg.n_modules
        )));
    }
    let kin = Kinematics::compute(cfg, q);
    let k = stiffness_matrix(params, q)?;
    let packed = q.packed();
    let mut r: Vec<f64> = k
        .diagonal()
        .iter()
        .zip(packed.iter())
        .map(|(kd, x)| kd * x)
        .collect();
    kin.accumulate_gravity(cfg, Some(&mut r));
    // Cable tension applies −T ∂λ/∂q, i.e. the residual gains +T ∂λ/∂q.
    for cable in 0..2 {
        if u_c[cable] != 0.0 {
            kin.accumulate_path_length_gradient(cable, u_c[cable], &mut r);
        }
    }
    // Contact: residual − H_eᵀ u_e with row m = ∂gap_m/∂q = −sign(bend)·1 on θ_m.
    for m in 0..cfg.n_modules {
        let bend = q.module_bend_angle(m);
        let sign = if bend >= 0.0 { 1.0 } else { -1.0 };
        for j in 0..REV_PER_MODULE {
            r[m * REV_PER_MODULE + j] += sign * u_e[m];
        }
    }
    Ok(GeneralizedForces(r))
}

/// Minimises the total potential energy under the stopper and compression
/// constraints. Deterministic: the initial guess is `q = 0` unless a warm
/// start is supplied.
pub fn solve_equilibrium(
    cfg: &ChainConfig,
    params: &StiffnessParams,
    u_c: [f64; 2],
    opts: &SolveOptions,
) -> Result<EquilibriumResult> {
    cfg.validate()?;
    params.validate_positive(cfg)?;
    if !u_c.iter().all(|t| t.is_finite() && *t >= 0.0) {
        return Err(Error::invalid(format!(
            "cable tensions must be finite and nonnegative, got {u_c:?}"
        )));
    }
    let model = StaticModel {
        cfg,
        params,
        tensions: u_c,
        tip_force: opts.tip_force,
    };

    let dof = cfg.dof();
    let mut x = match &opts.warm_start {
        Some(q0) => {
            cfg.check_state(q0)?;
            q0.packed()
        }
        None => vec![0.0; dof],
    };
    project(cfg, &mut x);

    let m = preconditioner(cfg, params, u_c);
    let m_inv: Vec<f64> = m.iter().map(|v| 1.0 / v).collect();

    let mut grad = vec![0.0; dof];
    let mut q = JointState::from_packed(cfg.n_modules, &x)?;
    let mut energy = model.energy_and_gradient(&q, &mut grad);
    let mut pg = projected_gradient_norm(cfg, &x, &grad);
    let mut step = 1.0f64;
    let mut stall_count = 0usize;
    let mut iterations = 0usize;
    // Energy decrements drop below float resolution once the iterate is
    // close; from there steps are accepted on projected-gradient descent
    // instead.
    let mut polish = false;

    while pg > opts.tol && iterations < opts.max_iterations {
        iterations += 1;

        if polish {
            let mut alpha = step;
            let mut progressed = false;
            let mut trial_x = vec![0.0; dof];
            let mut trial_grad = vec![0.0; dof];
            while alpha > 1e-18 {
                for i in 0..dof {
                    trial_x[i] = x[i] - alpha * m_inv[i] * grad[i];
                }
                project_weighted(cfg, &mut trial_x, &m_inv);
                let trial_q = JointState::from_packed(cfg.n_modules, &trial_x)?;
                let trial_energy = model.energy_and_gradient(&trial_q, &mut trial_grad);
                let trial_pg = projected_gradient_norm(cfg, &trial_x, &trial_grad);
                if trial_pg < pg {
                    x.copy_from_slice(&trial_x);
                    grad.copy_from_slice(&trial_grad);
                    q = trial_q;
                    energy = trial_energy;
                    pg = trial_pg;
                    step = alpha;
                    progressed = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !progressed {
                break; // at the float floor of the fixed-point map
            }
            continue;
        }

        let mut alpha = (step * 2.0).min(4.0);
        let mut accepted = false;
        let mut trial_x = vec![0.0; dof];
        let mut trial_energy = 0.0;
        while alpha > 1e-18 {
            for i in 0..dof {
                trial_x[i] = x[i] - alpha * m_inv[i] * grad[i];
            }
            project_weighted(cfg, &mut trial_x, &m_inv);
            let decrease_bound: f64 = grad
                .iter()
                .zip(trial_x.iter().zip(x.iter()))
                .map(|(g, (t, xi))| g * (t - xi))
                .sum();
            let trial_q = JointState::from_packed(cfg.n_modules, &trial_x)?;
            trial_energy = model.energy(&trial_q);
            if trial_energy <= energy + 1e-4 * decrease_bound {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }

        let float_floor = 1e-13 * (1.0 + energy.abs());
        if !accepted {
            if pg <= opts.tol * 1e4 {
                polish = true;
                step = step.max(1e-6);
                continue;
            }
            return Err(Error::LineSearch(format!(
                "no descent step found at projected gradient {pg:.3e}"
            )));
        }

        if energy - trial_energy <= float_floor {
            stall_count += 1;
            if stall_count >= 3 {
                if pg <= opts.tol * 1e4 {
                    polish = true;
                    stall_count = 0;
                    continue;
                }
                let best = finish(cfg, &trial_x, &grad, pg, false, iterations, energy);
                return Err(Error::SolverFailure {
                    reason: "energy failed to decrease over 3 successive accepted steps"
                        .to_string(),
                    iterations,
                    residual: pg,
                    best: Box::new(best),
                });
            }
        } else {
            stall_count = 0;
        }

        x.copy_from_slice(&trial_x);
        step = alpha;
        q = JointState::from_packed(cfg.n_modules, &x)?;
        energy = model.energy_and_gradient(&q, &mut grad);
        pg = projected_gradient_norm(cfg, &x, &grad);
    }

    let converged = pg <= opts.tol;
    let result = finish(cfg, &x, &grad, pg, converged, iterations, energy);
    if converged {
        Ok(result)
    } else {
        Err(Error::SolverFailure {
            reason: if iterations >= opts.max_iterations {
                "iteration budget exhausted".to_string()
            } else {
                "projected-gradient descent reached its float floor".to_string()
            },
            iterations,
            residual: pg,
            best: Box::new(result),
        })
    }
}

fn finish(
    cfg: &ChainConfig,
    x: &[f64],
    grad: &[f64],
    pg: f64,
    converged: bool,
    iterations: usize,
    energy: f64,
) -> EquilibriumResult {
    let q = JointState::from_packed(cfg.n_modules, x).expect("dimensions preserved");
    let n = cfg.n_modules;
    let mut contact_torques = vec![0.0; n];
    let mut contact_forces = vec![0.0; n];
    let lever = cfg.stopper.l_t / 2.0;
    for m in 0..n {
        let bend = q.module_bend_angle(m);
        let gap = cfg.limit_angle - bend.abs();
        if gap <= ACTIVE_GAP_TOL {
            let sign = if bend >= 0.0 { 1.0 } else { -1.0 };
            // Stationarity on the sprung joints reads ∇Π = −λ·sign; the two
            // free hinges additionally carry their travel-stop reactions and
            // are excluded.
            let mean: f64 = grad[m * REV_PER_MODULE + 2..(m + 1) * REV_PER_MODULE]
                .iter()
                .sum::<f64>()
                / (REV_PER_MODULE - 2) as f64;
            let lambda = (-sign * mean).max(0.0);
            contact_torques[m] = lambda;
            contact_forces[m] = lambda / lever;
        }
    }
    EquilibriumResult {
        q_eq: q,
        residual_norm: pg,
        contact_forces,
        contact_torques,
        converged,
        iterations,
        energy,
    }
}

/// Per-joint rotations of a module bent to `bend`: the free hinges take up
/// their play first, the four sprung twist joints share the remainder
/// equally. This is the distribution the energy minimiser selects, since the
/// hinges are springless.
pub fn bend_distribution(cfg: &ChainConfig, bend: f64) -> [f64; REV_PER_MODULE] {
    let sign = if bend >= 0.0 { 1.0 } else { -1.0 };
    let mag = bend.abs();
    let hinge = (mag / 2.0).min(cfg.hinge_play);
    let sprung = (mag - 2.0 * hinge) / 4.0;
    let mut out = [0.0; REV_PER_MODULE];
    out[0] = sign * hinge;
    out[1] = sign * hinge;
    for o in out.iter_mut().skip(2) {
        *o = sign * sprung;
    }
    out
}

/// The geometric limit pose `q*`: every module bent to the limit angle, the
/// free hinges on their travel stops, the sprung joints sharing the rest of
/// the rotation equally, and every segment compressed equally so consecutive
/// shaft spacing equals `limit_spacing`. Purely geometric; independent of
/// stiffness.
pub fn limit_pose(cfg: &ChainConfig) -> Result<JointState> {
    cfg.validate()?;
    let n = cfg.n_modules;
    let dist = bend_distribution(cfg, cfg.limit_angle);
    let factor = chord_factor(cfg, cfg.limit_angle);
    let seg_len = if factor > 0.0 {
        cfg.limit_spacing / factor
    } else {
        cfg.segment_rest_length()
    };
    let ell_each = seg_len - cfg.segment_rest_length();
    let mut q = JointState::zero(n);
    for m in 0..n {
        q.theta[m * REV_PER_MODULE..(m + 1) * REV_PER_MODULE].copy_from_slice(&dist);
    }
    q.ell.iter_mut().for_each(|e| *e = ell_each);
    cfg.check_state(&q)?;
    Ok(q)
}

/// Chord length of one module per unit segment length at a given bend, with
/// the bend distributed by [`bend_distribution`]. The walking order is
/// hinge, four sprung joints, hinge, so segment `k` sits at the partial sum
/// of the first `k` rotations.
fn chord_factor(cfg: &ChainConfig, bend: f64) -> f64 {
    let dist = bend_distribution(cfg, bend);
    // Walking order of rotations: slots [0, 2, 3, 4, 5, 1].
    let walk = [dist[0], dist[2], dist[3], dist[4], dist[5], dist[1]];
    let (mut sx, mut sz) = (0.0, 0.0);
    let mut angle = 0.0;
    for w in walk.iter().take(SEGMENTS_PER_MODULE) {
        angle += w;
        sx += angle.sin();
        sz += angle.cos();
    }
    (sx * sx + sz * sz).sqrt()
}

/// Least-squares tension on cable 0 that balances the limit pose in every
/// free direction, together with the implied per-module stopper torques and
/// per-hinge travel-stop reactions.
///
/// At the limit pose the constrained directions are the per-module bend sums
/// (stoppers) and the free hinges (on their travel stops); the free
/// directions are the segment extensions and the zero-sum redistributions
/// among each module's sprung joints.
pub(crate) struct HoldSolution {
    pub tension: f64,
    /// Per-module stopper contact torque (N·m).
    pub contact: Vec<f64>,
    /// Per-hinge travel-stop reaction torque (N·m), 2 per module.
    pub hinge_reactions: Vec<f64>,
}

pub(crate) fn hold_tension(cfg: &ChainConfig, params: &StiffnessParams) -> Result<HoldSolution> {
    let q_star = limit_pose(cfg)?;
    params.validate_positive(cfg)?;
    let kin = Kinematics::compute(cfg, &q_star);
    let dof = cfg.dof();

    // Load to balance: b = K(q*)q* + G(q*).
    let k = stiffness_matrix(params, &q_star)?;
    let packed = q_star.packed();
    let mut b: Vec<f64> = k
        .diagonal()
        .iter()
        .zip(packed.iter())
        .map(|(kd, x)| kd * x)
        .collect();
    kin.accumulate_gravity(cfg, Some(&mut b));

    // Tension direction: H_c row of cable 0 is the reel-in gradient,
    // i.e. −∂λ/∂q.
    let mut c = vec![0.0; dof];
    kin.accumulate_path_length_gradient(0, -1.0, &mut c);

    // Free directions: zero the fully constrained hinges, remove the mean
    // over each module's sprung joints.
    let project_free = |v: &mut [f64]| {
        for m in 0..cfg.n_modules {
            let idx = m * REV_PER_MODULE;
            v[idx] = 0.0;
            v[idx + 1] = 0.0;
            let sprung = &mut v[idx + 2..idx + REV_PER_MODULE];
            let mean: f64 = sprung.iter().sum::<f64>() / sprung.len() as f64;
            sprung.iter_mut().for_each(|x| *x -= mean);
        }
    };
    let mut b_free = b.clone();
    let mut c_free = c.clone();
    project_free(&mut b_free);
    project_free(&mut c_free);

    let cc: f64 = c_free.iter().map(|x| x * x).sum();
    let cb: f64 = c_free.iter().zip(b_free.iter()).map(|(x, y)| x * y).sum();
    let tension = if cc > 0.0 { cb / cc } else { 0.0 };

    // Multipliers from the constrained directions. With the residual
    // r = b − T·c (the gradient of the potential at q*), stationarity reads
    // r = −λ_m on the sprung joints and r = −λ_m − ν on the hinges.
    let mut contact = vec![0.0; cfg.n_modules];
    let mut hinge_reactions = vec![0.0; 2 * cfg.n_modules];
    for m in 0..cfg.n_modules {
        let idx = m * REV_PER_MODULE;
        let mut mean = 0.0;
        for j in 2..REV_PER_MODULE {
            mean += b[idx + j] - tension * c[idx + j];
        }
        mean /= (REV_PER_MODULE - 2) as f64;
        contact[m] = -mean;
        for h in 0..2 {
            let r = b[idx + h] - tension * c[idx + h];
            hinge_reactions[2 * m + h] = -r - contact[m];
        }
    }
    Ok(HoldSolution {
        tension,
        contact,
        hinge_reactions,
    })
}

/// Motor-side torque pair that statically holds the chain at the limit pose,
/// computed as the least-squares tension over the free directions followed
/// by a nonnegativity check of the implied stopper contact and hinge
/// reactions.
pub fn end_stop_torque(cfg: &ChainConfig, params: &StiffnessParams) -> Result<[f64; 2]> {
    let sol = hold_tension(cfg, params)?;
    let scale = sol
        .contact
        .iter()
        .fold(sol.tension.abs().max(1.0), |acc, c| acc.max(c.abs()));
    if sol.tension < -1e-9 * scale {
        return Err(Error::ModelInconsistency(format!(
            "holding the limit pose requires pushing the cable (tension {:.3e} N)",
            sol.tension
        )));
    }
    for (m, &c) in sol.contact.iter().enumerate() {
        if c < -1e-9 * scale {
            return Err(Error::ModelInconsistency(format!(
                "module {m} needs negative stopper contact {c:.3e} N·m to hold the limit pose"
            )));
        }
    }
    for (h, &v) in sol.hinge_reactions.iter().enumerate() {
        if v < -1e-9 * scale {
            return Err(Error::ModelInconsistency(format!(
                "hinge {h} needs a negative travel-stop reaction {v:.3e} N·m to hold the limit pose"
            )));
        }
    }
    Ok([sol.tension.max(0.0) * cfg.pulley_radius, 0.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gravity_free(cfg: &mut ChainConfig) {
        cfg.gravity = Vector3::zeros();
    }

    fn test_params() -> StiffnessParams {
        StiffnessParams::constant(6.0e4, 5.0e4, 12.0)
    }

    #[test]
    fn unloaded_rest_is_origin() {
        let mut cfg = ChainConfig::default_chain();
        gravity_free(&mut cfg);
        let params = test_params();
        let r = solve_equilibrium(&cfg, &params, [0.0, 0.0], &SolveOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.q_eq.packed().iter().all(|x| x.abs() < 1e-12));
        assert!(r.residual_norm <= 1e-8);
        assert!(r.contact_forces.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn residual_zero_at_unloaded_rest() {
        let mut cfg = ChainConfig::default_chain();
        gravity_free(&mut cfg);
        let params = test_params();
        let q = JointState::zero(cfg.n_modules);
        let r = static_residual(&cfg, &params, &q, [0.0, 0.0], &vec![0.0; 7]).unwrap();
        assert_eq!(r.norm(), 0.0);
    }

    #[test]
    fn residual_equals_gravity_loading_at_rest() {
        // Gravity in the bending plane, transverse to the chain.
        let mut cfg = ChainConfig::default_chain();
        cfg.gravity = Vector3::new(-9.81, 0.0, 0.0);
        let params = test_params();
        let q = JointState::zero(cfg.n_modules);
        let r = static_residual(&cfg, &params, &q, [0.0, 0.0], &vec![0.0; 7]).unwrap();
        let g = crate::prbm::gravity_vector(&cfg, &q).unwrap();
        assert!(r.norm() > 0.0);
        for (a, b) in r.0.iter().zip(g.0.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn solver_residual_self_consistency() {
        let mut cfg = ChainConfig::default_chain();
        gravity_free(&mut cfg);
        let params = test_params();
        let r = solve_equilibrium(&cfg, &params, [40.0, 0.0], &SolveOptions::default()).unwrap();
        assert!(r.converged);
        let mut resid =
            static_residual(&cfg, &params, &r.q_eq, [40.0, 0.0], &r.contact_torques)
                .unwrap()
                .0;
        // Hinges on their travel stops carry a reaction torque that the
        // stopper-only residual form leaves in place: it must push back
        // against the stop, and the rest of the residual must vanish.
        for m in 0..cfg.n_modules {
            for h in 0..2 {
                let i = m * 6 + h;
                let t = r.q_eq.theta[i];
                if cfg.hinge_play - t.abs() <= 1e-9 {
                    let reaction = -resid[i] * t.signum();
                    assert!(reaction >= -1e-7, "hinge {i} reaction {reaction:.3e}");
                    resid[i] = 0.0;
                }
            }
        }
        let norm: f64 = resid.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "residual at equilibrium {norm:.3e}");
    }

    #[test]
    fn large_tension_engages_every_stopper() {
        let mut cfg = ChainConfig::default_chain();
        gravity_free(&mut cfg);
        let params = test_params();
        let hold = hold_tension(&cfg, &params).unwrap().tension;
        let r = solve_equilibrium(&cfg, &params, [hold * 3.0, 0.0], &SolveOptions::default())
            .unwrap();
        assert!(r.converged);
        for m in 0..cfg.n_modules {
            let bend = r.q_eq.module_bend_angle(m);
            assert_relative_eq!(bend, cfg.limit_angle, epsilon = 1e-8);
            assert!(
                r.contact_forces[m] > 0.0,
                "module {m} should push on its stopper"
            );
        }
    }

    #[test]
    fn complementarity_holds_at_solutions() {
        let mut cfg = ChainConfig::default_chain();
        gravity_free(&mut cfg);
        let params = test_params();
        let hold = hold_tension(&cfg, &params).unwrap().tension;
        for frac in [0.2, 0.8, 1.5, 3.0] {
            let r =
                solve_equilibrium(&cfg, &params, [hold * frac, 0.0], &SolveOptions::default())
                    .unwrap();
            for m in 0..cfg.n_modules {
                let gap = cfg.limit_angle - r.q_eq.module_bend_angle(m).abs();
                assert!(gap >= -1e-12);
                assert!(
                    gap * r.contact_torques[m] <= 1e-6,
                    "complementarity violation at tension fraction {frac}: gap {gap:.3e}, torque {:.3e}",
                    r.contact_torques[m]
                );
            }
        }
    }

    #[test]
    fn monotone_loading_never_unbends() {
        let mut cfg = ChainConfig::default_chain();
        gravity_free(&mut cfg);
        let params = test_params();
        let mut last_total = -1.0;
        for i in 0..8 {
            let t = 30.0 * i as f64;
            let r =
                solve_equilibrium(&cfg, &params, [t, 0.0], &SolveOptions::default()).unwrap();
            let total: f64 = (0..cfg.n_modules)
                .map(|m| r.q_eq.module_bend_angle(m))
                .sum();
            assert!(
                total >= last_total - 1e-9,
                "bend decreased from {last_total:.6} to {total:.6} at tension {t}"
            );
            last_total = total;
        }
    }

    #[test]
    fn limit_pose_geometry() {
        let cfg = ChainConfig::default_chain();
        let q = limit_pose(&cfg).unwrap();
        // Every module at the limit angle.
        for m in 0..cfg.n_modules {
            assert_relative_eq!(
                q.module_bend_angle(m),
                cfg.limit_angle,
                epsilon = 1e-12
            );
        }
        // Consecutive shaft spacing shrinks to 44.1 mm exactly.
        let kin = crate::prbm::forward_kinematics(&cfg, &q).unwrap();
        for w in kin.connectors.windows(2) {
            assert_relative_eq!((w[1] - w[0]).norm(), 0.0441, epsilon = 1e-12);
        }
        // Spacing delta matches the published 10.2 mm compression.
        assert_relative_eq!(cfg.limit_delta(), 0.0102, epsilon = 1e-12);
    }

    #[test]
    fn zero_limit_angle_gives_zero_pose() {
        let mut cfg = ChainConfig::default_chain();
        cfg.limit_angle = 0.0;
        cfg.hinge_play = 0.0;
        cfg.limit_spacing = cfg.shaft_spacing;
        let q = limit_pose(&cfg).unwrap();
        assert!(q.packed().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn limit_pose_gap_below_straight_gap() {
        let cfg = ChainConfig::default_chain();
        let q_star = limit_pose(&cfg).unwrap();
        let g_limit = crate::prbm::cable_site_gap(&cfg, &q_star).unwrap();
        let g_straight =
            crate::prbm::cable_site_gap(&cfg, &JointState::zero(cfg.n_modules)).unwrap();
        assert!(g_limit < g_straight);
    }

    #[test]
    fn end_stop_torque_scales_linearly_with_stiffness() {
        let mut cfg = ChainConfig::default_chain();
        gravity_free(&mut cfg);
        let params = test_params();
        let doubled = StiffnessParams::constant(12.0e4, 10.0e4, 24.0);
        let t1 = end_stop_torque(&cfg, &params).unwrap();
        let t2 = end_stop_torque(&cfg, &doubled).unwrap();
        assert_relative_eq!(t2[0], 2.0 * t1[0], max_relative = 1e-9);
        assert_eq!(t1[1], 0.0);
    }

    #[test]
    fn end_stop_torque_zero_for_zero_stiffness() {
        let mut cfg = ChainConfig::default_chain();
        gravity_free(&mut cfg);
        // Tiny but positive so validation passes; torque scales to ~zero.
        let params = StiffnessParams::constant(1e-9, 1e-9, 1e-12);
        let t = end_stop_torque(&cfg, &params).unwrap();
        assert!(t[0].abs() < 1e-9);
    }

    #[test]
    fn payload_mass_equals_equivalent_tip_force() {
        // 100 g at the tip under in-plane gravity vs. the equivalent 0.981 N
        // dead load must produce the same equilibrium.
        let mut cfg_mass = ChainConfig::default_chain();
        cfg_mass.gravity = Vector3::new(-9.81, 0.0, 0.0);
        cfg_mass.tip_payload_mass = 0.1;
        let params = test_params();
        let r_mass =
            solve_equilibrium(&cfg_mass, &params, [20.0, 0.0], &SolveOptions::default()).unwrap();

        let mut cfg_force = cfg_mass.clone();
        cfg_force.tip_payload_mass = 0.0;
        let opts = SolveOptions {
            tip_force: Some(Vector3::new(-0.981, 0.0, 0.0)),
            ..SolveOptions::default()
        };
        let r_force = solve_equilibrium(&cfg_force, &params, [20.0, 0.0], &opts).unwrap();

        for (a, b) in r_mass.q_eq.packed().iter().zip(r_force.q_eq.packed().iter()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_negative_tension() {
        let cfg = ChainConfig::default_chain();
        let params = test_params();
        assert!(matches!(
            solve_equilibrium(&cfg, &params, [-1.0, 0.0], &SolveOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
