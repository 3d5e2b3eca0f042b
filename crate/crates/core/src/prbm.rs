//! Pseudo-rigid-body model of the hinge-beam chain.
//!
//! Each module is a planar serial chain of eleven joints. The two beam
//! elements that carry bending are modelled as four compliant prismatic
//! segments (stiffness `K_p1`) hinged to the connectors through two free
//! revolute joints (`K_r1 = 0`), and the torsion element between them is
//! lumped into one compliant prismatic segment (`K_p2`) flanked by four
//! compliant revolute joints (`K_r2`). Walking a module from its proximal
//! connector to the distal one the joints appear in this order:
//!
//! ```text
//! R(free) P(b1) R(t1) P(b2) R(t2) P(tw) R(t3) P(b3) R(t4) P(b4) R(free)
//! ```
//!
//! Storage order is module-major and groups rotations before translations,
//! `q = [theta; ell]`. Within a module the rotational slots are
//! `[free-proximal, free-distal, t1, t2, t3, t4]` and the translational
//! slots `[b1, b2, b3, b4, tw]`. For the default seven-module chain this
//! yields `dim(q) = 77` split 42/35.
//!
//! The free hinges carry no spring but have a finite travel (`hinge_play`):
//! the shaft seats bind against the connector past a few degrees. Without
//! that bound a pair of springless serial hinges is an unresisted internal
//! mechanism and the module could fold without deforming any beam. With it,
//! the hinges take up their play and the sprung twist joints carry the rest
//! of the module bend, which is what gives the approach its smooth torque
//! ramp up to stopper contact.
//!
//! The chain bends in the x–z plane: a straight chain extends along +z and
//! positive joint angles tilt the tip towards +x, the side on which cable 0
//! is routed. Cable 1 mirrors it at −x. Gravity may point anywhere; a
//! horizontal bench mount corresponds to gravity along −y, which produces no
//! in-plane load.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotational degrees of freedom per module.
pub const REV_PER_MODULE: usize = 6;
/// Translational degrees of freedom per module.
pub const PRIS_PER_MODULE: usize = 5;
/// Total degrees of freedom per module.
pub const DOF_PER_MODULE: usize = REV_PER_MODULE + PRIS_PER_MODULE;
/// Prismatic segments that make up one module along the chain axis.
pub const SEGMENTS_PER_MODULE: usize = PRIS_PER_MODULE;

/// Default central-difference step for the cable jacobian, in native units
/// (radians and metres).
pub const DEFAULT_CABLE_FD_STEP: f64 = 1e-6;

const MM: f64 = 1e-3;

// Healthy-structure calibration constants (see `examples/calibrate.rs`).
// The quadratic terms add a few percent of softening towards the range
// edges; the constant terms carry the calibration.
const CAL_KP1_0: f64 = 6.0e4;
const CAL_KP1_2: f64 = -4.0e6;
const CAL_KP2_0: f64 = 5.0e4;
const CAL_KP2_2: f64 = -3.0e6;
const CAL_KR2_0: f64 = 12.0;
const CAL_KR2_2: f64 = -2.0;

/// Chain element in walking order; `slot` is the storage slot within the
/// module (see module docs).
#[derive(Clone, Copy, Debug)]
enum ChainElem {
    Rev { slot: usize },
    Pris { slot: usize },
}

const MODULE_CHAIN: [ChainElem; DOF_PER_MODULE] = [
    ChainElem::Rev { slot: 0 },
    ChainElem::Pris { slot: 0 },
    ChainElem::Rev { slot: 2 },
    ChainElem::Pris { slot: 1 },
    ChainElem::Rev { slot: 3 },
    ChainElem::Pris { slot: 4 },
    ChainElem::Rev { slot: 4 },
    ChainElem::Pris { slot: 2 },
    ChainElem::Rev { slot: 5 },
    ChainElem::Pris { slot: 3 },
    ChainElem::Rev { slot: 1 },
];

/// Cable sites sit on the body between the second bend segment and the
/// torsion segment, i.e. after this many joints of the module have been
/// walked.
const SITE_CHAIN_POS: usize = 4;

/// What a degree of freedom physically is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointKind {
    /// Free hinge at a connector shaft; carries no spring.
    BendRevolute,
    /// Compliant revolute joint of the torsion element (`K_r2`).
    TwistRevolute,
    /// Compliant axial segment of a bend beam (`K_p1`).
    BendPrismatic,
    /// Compliant axial segment of the lumped torsion element (`K_p2`).
    TwistPrismatic,
}

/// Kind of the rotational storage slot `0..6`.
pub fn theta_slot_kind(slot: usize) -> JointKind {
    if slot < 2 {
        JointKind::BendRevolute
    } else {
        JointKind::TwistRevolute
    }
}

/// Kind of the translational storage slot `0..5`.
pub fn ell_slot_kind(slot: usize) -> JointKind {
    if slot < 4 {
        JointKind::BendPrismatic
    } else {
        JointKind::TwistPrismatic
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Stopper dimensions, SI metres. See [`crate::geometry`] for the sizing
/// arithmetic itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopperLengths {
    /// Total radial span.
    pub l_t: f64,
    /// Flexible arc length at the limit pose.
    pub l_f: f64,
    /// Minimum radial clearance.
    pub c: f64,
}

/// Local placement of a module's cable-site pair on the mid-module body.
/// Cable 0 uses `+lateral`, cable 1 `-lateral`; `axial` shifts the pair
/// along the local chain axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteOffset {
    pub lateral: f64,
    pub axial: f64,
}

/// Geometry, inertia and actuation layout of the chain. All lengths in
/// metres, angles in radians.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub n_modules: usize,
    /// Centre-to-centre distance between consecutive rotary shafts when
    /// straight; also the module pitch.
    pub shaft_spacing: f64,
    /// Shaft spacing at the limit pose, once the stoppers butt.
    pub limit_spacing: f64,
    /// Per-module bend limit enforced by the stoppers.
    pub limit_angle: f64,
    /// Travel of each free hinge before its seat binds (rad). Must not
    /// exceed half the limit angle, otherwise the hinges alone could reach
    /// the stopper with no elastic resistance.
    pub hinge_play: f64,
    /// Characteristic radius used to normalise `K_r2` to N/m. No number is
    /// published for the hardware; half the shaft spacing is a placeholder.
    pub char_radius: f64,
    /// Total structural mass, spread uniformly over the prismatic segments.
    pub total_mass: f64,
    /// Gravity vector in the world frame, m/s².
    pub gravity: Vector3<f64>,
    /// Per-module cable-site placements; length must equal `n_modules`.
    pub cable_sites: Vec<SiteOffset>,
    pub stopper: StopperLengths,
    /// Motor pulley radius converting cable tension to motor torque.
    pub pulley_radius: f64,
    /// Fatigue-safe magnitude bound on any single segment extension.
    pub max_compression: f64,
    /// Optional payload mass rigidly attached at the tip connector.
    pub tip_payload_mass: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self::default_chain()
    }
}

impl ChainConfig {
    /// The seven-module bench chain with the published geometry.
    pub fn default_chain() -> Self {
        let n = 7;
        ChainConfig {
            n_modules: n,
            shaft_spacing: 54.3 * MM,
            limit_spacing: 44.1 * MM,
            limit_angle: 45f64.to_radians(),
            hinge_play: 5f64.to_radians(),
            char_radius: 27.15 * MM,
            total_mass: 0.35,
            gravity: Vector3::new(0.0, -9.81, 0.0),
            cable_sites: vec![
                SiteOffset {
                    lateral: 25.0 * MM,
                    axial: 0.0,
                };
                n
            ],
            stopper: StopperLengths {
                l_t: 75.9 * MM,
                l_f: 45.2 * MM,
                c: 4.8 * MM,
            },
            pulley_radius: 10.0 * MM,
            max_compression: 25.0 * MM,
            tip_payload_mass: 0.0,
        }
    }

    /// Single-module variant of the default chain, used by the brute-force
    /// equilibrium oracle.
    pub fn single_module() -> Self {
        let mut cfg = Self::default_chain();
        cfg.n_modules = 1;
        cfg.cable_sites.truncate(1);
        cfg.total_mass /= 7.0;
        cfg
    }

    pub fn dof(&self) -> usize {
        DOF_PER_MODULE * self.n_modules
    }

    pub fn n_rev(&self) -> usize {
        REV_PER_MODULE * self.n_modules
    }

    pub fn n_pris(&self) -> usize {
        PRIS_PER_MODULE * self.n_modules
    }

    /// Rest length of one prismatic segment.
    pub fn segment_rest_length(&self) -> f64 {
        self.shaft_spacing / SEGMENTS_PER_MODULE as f64
    }

    /// Shaft-spacing change between straight and limit pose.
    pub fn limit_delta(&self) -> f64 {
        self.shaft_spacing - self.limit_spacing
    }

    /// Mass of one prismatic segment link.
    pub fn link_mass(&self) -> f64 {
        self.total_mass / (self.n_pris() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modules < 1 {
            return Err(Error::config("n_modules must be >= 1"));
        }
        for (name, v) in [
            ("shaft_spacing", self.shaft_spacing),
            ("limit_spacing", self.limit_spacing),
            ("char_radius", self.char_radius),
            ("pulley_radius", self.pulley_radius),
            ("max_compression", self.max_compression),
            ("stopper.l_t", self.stopper.l_t),
            ("stopper.l_f", self.stopper.l_f),
            ("stopper.c", self.stopper.c),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.limit_spacing > self.shaft_spacing {
            return Err(Error::config(
                "limit_spacing must not exceed shaft_spacing",
            ));
        }
        if self.limit_delta() >= self.max_compression {
            return Err(Error::config(format!(
                "limit compression {:.1} mm must stay below the safe bound {:.1} mm",
                self.limit_delta() / MM,
                self.max_compression / MM
            )));
        }
        if !(self.limit_angle >= 0.0) {
            return Err(Error::config("limit_angle must be nonnegative"));
        }
        if !(self.hinge_play >= 0.0) || self.hinge_play > self.limit_angle / 2.0 {
            return Err(Error::config(format!(
                "hinge_play {:.2} deg must lie in [0, limit_angle/2]",
                self.hinge_play.to_degrees()
            )));
        }
        if self.cable_sites.len() != self.n_modules {
            return Err(Error::config(format!(
                "cable_sites has {} entries for {} modules",
                self.cable_sites.len(),
                self.n_modules
            )));
        }
        if self.total_mass < 0.0 || self.tip_payload_mass < 0.0 {
            return Err(Error::config("masses must be nonnegative"));
        }
        Ok(())
    }

    /// Checks dimensions and the admissible-range invariants of a state.
    pub fn check_state(&self, q: &JointState) -> Result<()> {
        if q.theta.len() != self.n_rev() || q.ell.len() != self.n_pris() {
            return Err(Error::invalid(format!(
                "state dimension {}+{} does not match the {}-module chain ({}+{})",
                q.theta.len(),
                q.ell.len(),
                self.n_modules,
                self.n_rev(),
                self.n_pris()
            )));
        }
        let slack = 1e-9;
        for (i, &e) in q.ell.iter().enumerate() {
            if e.abs() > self.max_compression + slack {
                return Err(Error::invalid(format!(
                    "segment {} extension {:.3} mm exceeds the {:.1} mm bound",
                    i,
                    e / MM,
                    self.max_compression / MM
                )));
            }
        }
        for m in 0..self.n_modules {
            for slot in 0..2 {
                let t = q.theta[m * REV_PER_MODULE + slot];
                if t.abs() > self.hinge_play + slack {
                    return Err(Error::invalid(format!(
                        "module {} free hinge {} at {:.2} deg exceeds the {:.2} deg play",
                        m,
                        slot,
                        t.to_degrees(),
                        self.hinge_play.to_degrees()
                    )));
                }
            }
        }
        for m in 0..self.n_modules {
            let bend = q.module_bend_angle(m);
            if bend.abs() > self.limit_angle + slack {
                return Err(Error::invalid(format!(
                    "module {} bend angle {:.2} deg exceeds the {:.2} deg limit",
                    m,
                    bend.to_degrees(),
                    self.limit_angle.to_degrees()
                )));
            }
        }
        Ok(())
    }
}

// --- JSON document (lengths in millimetres) --------------------------------

#[derive(Serialize, Deserialize)]
struct SiteOffsetFile {
    lateral_mm: f64,
    #[serde(default)]
    axial_mm: f64,
}

#[derive(Serialize, Deserialize)]
struct StopperFile {
    l_t_mm: f64,
    l_f_mm: f64,
    c_mm: f64,
}

fn default_hinge_play_deg() -> f64 {
    5.0
}

#[derive(Serialize, Deserialize)]
struct ChainConfigFile {
    n_modules: usize,
    shaft_spacing_mm: f64,
    limit_spacing_mm: f64,
    limit_angle_deg: f64,
    #[serde(default = "default_hinge_play_deg")]
    hinge_play_deg: f64,
    char_radius_mm: f64,
    total_mass_kg: f64,
    gravity_mps2: [f64; 3],
    cable_lateral_offset_mm: f64,
    #[serde(default)]
    cable_sites: Option<Vec<SiteOffsetFile>>,
    stopper: StopperFile,
    pulley_radius_mm: f64,
    max_compression_mm: f64,
    #[serde(default)]
    tip_payload_kg: f64,
}

impl ChainConfig {
    pub fn to_json(&self) -> Result<String> {
        let sites: Vec<SiteOffsetFile> = self
            .cable_sites
            .iter()
            .map(|s| SiteOffsetFile {
                lateral_mm: s.lateral / MM,
                axial_mm: s.axial / MM,
            })
            .collect();
        let file = ChainConfigFile {
            n_modules: self.n_modules,
            shaft_spacing_mm: self.shaft_spacing / MM,
            limit_spacing_mm: self.limit_spacing / MM,
            limit_angle_deg: self.limit_angle.to_degrees(),
            hinge_play_deg: self.hinge_play.to_degrees(),
            char_radius_mm: self.char_radius / MM,
            total_mass_kg: self.total_mass,
            gravity_mps2: [self.gravity.x, self.gravity.y, self.gravity.z],
            cable_lateral_offset_mm: self.cable_sites[0].lateral / MM,
            cable_sites: Some(sites),
            stopper: StopperFile {
                l_t_mm: self.stopper.l_t / MM,
                l_f_mm: self.stopper.l_f / MM,
                c_mm: self.stopper.c / MM,
            },
            pulley_radius_mm: self.pulley_radius / MM,
            max_compression_mm: self.max_compression / MM,
            tip_payload_kg: self.tip_payload_mass,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ChainConfigFile = serde_json::from_str(text)?;
        let sites = match file.cable_sites {
            Some(list) => list
                .into_iter()
                .map(|s| SiteOffset {
                    lateral: s.lateral_mm * MM,
                    axial: s.axial_mm * MM,
                })
                .collect(),
            None => vec![
                SiteOffset {
                    lateral: file.cable_lateral_offset_mm * MM,
                    axial: 0.0,
                };
                file.n_modules
            ],
        };
        let cfg = ChainConfig {
            n_modules: file.n_modules,
            shaft_spacing: file.shaft_spacing_mm * MM,
            limit_spacing: file.limit_spacing_mm * MM,
            limit_angle: file.limit_angle_deg.to_radians(),
            hinge_play: file.hinge_play_deg.to_radians(),
            char_radius: file.char_radius_mm * MM,
            total_mass: file.total_mass_kg,
            gravity: Vector3::new(
                file.gravity_mps2[0],
                file.gravity_mps2[1],
                file.gravity_mps2[2],
            ),
            cable_sites: sites,
            stopper: StopperLengths {
                l_t: file.stopper.l_t_mm * MM,
                l_f: file.stopper.l_f_mm * MM,
                c: file.stopper.c_mm * MM,
            },
            pulley_radius: file.pulley_radius_mm * MM,
            max_compression: file.max_compression_mm * MM,
            tip_payload_mass: file.tip_payload_kg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Joint state and forces
// ---------------------------------------------------------------------------

/// Generalized coordinates `q = [theta; ell]` of the chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    /// Joint rotations, radians, module-major (6 per module).
    pub theta: Vec<f64>,
    /// Segment extensions, metres, module-major (5 per module); negative
    /// values are compressions.
    pub ell: Vec<f64>,
}

impl JointState {
    pub fn zero(n_modules: usize) -> Self {
        JointState {
            theta: vec![0.0; REV_PER_MODULE * n_modules],
            ell: vec![0.0; PRIS_PER_MODULE * n_modules],
        }
    }

    pub fn n_modules(&self) -> usize {
        self.theta.len() / REV_PER_MODULE
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + self.ell.len()
    }

    /// Sum of the module's six joint rotations; the quantity the stopper
    /// limits.
    pub fn module_bend_angle(&self, module: usize) -> f64 {
        self.theta[module * REV_PER_MODULE..(module + 1) * REV_PER_MODULE]
            .iter()
            .sum()
    }

    /// Flattens to the packed `[theta; ell]` vector.
    pub fn packed(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.ell);
        v
    }

    pub fn from_packed(n_modules: usize, v: &[f64]) -> Result<Self> {
        let nr = REV_PER_MODULE * n_modules;
        let np = PRIS_PER_MODULE * n_modules;
        if v.len() != nr + np {
            return Err(Error::invalid(format!(
                "packed state has {} entries, expected {}",
                v.len(),
                nr + np
            )));
        }
        Ok(JointState {
            theta: v[..nr].to_vec(),
            ell: v[nr..].to_vec(),
        })
    }
}

/// Generalized force vector ordered like the packed state: torques on the
/// rotational DOFs (N·m) followed by forces on the translational DOFs (N).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedForces(pub Vec<f64>);

impl GeneralizedForces {
    pub fn zeros(dof: usize) -> Self {
        GeneralizedForces(vec![0.0; dof])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn theta_part(&self, n_modules: usize) -> &[f64] {
        &self.0[..REV_PER_MODULE * n_modules]
    }

    pub fn ell_part(&self, n_modules: usize) -> &[f64] {
        &self.0[REV_PER_MODULE * n_modules..]
    }
}

// ---------------------------------------------------------------------------
// Stiffness
// ---------------------------------------------------------------------------

/// Polynomial joint stiffness coefficients.
///
/// `K_p1(l) = Σ a_i l^i` (N/m), `K_p2(l) = Σ b_i l^i` (N/m),
/// `K_r2(t) = Σ c_i t^i` (N·m/rad). All three polynomials share one degree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiffnessParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub degree: usize,
}

impl StiffnessParams {
    /// Builds and checks coefficient lengths. Positivity over the admissible
    /// range is checked separately against a chain configuration by
    /// [`StiffnessParams::validate_positive`].
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() || a.len() != c.len() {
            return Err(Error::config(format!(
                "coefficient sequences must share one nonzero length, got {}/{}/{}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        let degree = a.len() - 1;
        Ok(StiffnessParams { a, b, c, degree })
    }

    /// Degree-0 parameters: constant stiffness scalars.
    pub fn constant(k_p1: f64, k_p2: f64, k_r2: f64) -> Self {
        StiffnessParams {
            a: vec![k_p1],
            b: vec![k_p2],
            c: vec![k_r2],
            degree: 0,
        }
    }

    /// Calibrated healthy-structure stiffness for the default chain:
    /// quadratic polynomials whose limit-displacement values make the
    /// default chain rest on its stoppers at 1.40 N·m motor torque with the
    /// published shaft-spacing compression. Regenerate with
    /// `cargo run --example calibrate -p cfl-core`.
    pub fn default_healthy() -> Self {
        StiffnessParams {
            a: vec![CAL_KP1_0, 0.0, CAL_KP1_2],
            b: vec![CAL_KP2_0, 0.0, CAL_KP2_2],
            c: vec![CAL_KR2_0, 0.0, CAL_KR2_2],
            degree: 2,
        }
    }

    /// Samples each polynomial over the admissible displacement range of the
    /// given chain and rejects parameters that ever evaluate non-positive.
    pub fn validate_positive(&self, cfg: &ChainConfig) -> Result<()> {
        const SAMPLES: usize = 101;
        let check = |coeffs: &[f64], span: f64, label: &str| -> Result<()> {
            for i in 0..SAMPLES {
                let x = span * (2.0 * i as f64 / (SAMPLES - 1) as f64 - 1.0);
                let v = poly_eval(coeffs, x);
                if !(v > 0.0) {
                    return Err(Error::ParameterDomain(format!(
                        "{label} evaluates to {v:.3e} at displacement {x:.4}"
                    )));
                }
            }
            Ok(())
        };
        check(&self.a, cfg.max_compression, "K_p1")?;
        check(&self.b, cfg.max_compression, "K_p2")?;
        check(&self.c, cfg.limit_angle.max(1e-9), "K_r2")?;
        Ok(())
    }

    pub fn kp1(&self, ell: f64) -> f64 {
        poly_eval(&self.a, ell)
    }

    pub fn kp2(&self, ell: f64) -> f64 {
        poly_eval(&self.b, ell)
    }

    pub fn kr2(&self, theta: f64) -> f64 {
        poly_eval(&self.c, theta)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: StiffnessParams = serde_json::from_str(text)?;
        StiffnessParams::new(p.a, p.b, p.c)
    }
}

fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Antiderivative of `K(s)·s` from 0 to `x`: the elastic energy stored in a
/// joint whose restoring force is the secant form `K(x)·x`.
fn poly_elastic_energy(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    let mut xp = x * x; // x^(i+2)
    for (i, &c) in coeffs.iter().enumerate() {
        acc += c * xp / (i as f64 + 2.0);
        xp *= x;
    }
    acc
}

/// Per-joint stiffness values at a state, in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointStiffness {
    /// N·m/rad per rotational DOF; exactly zero on the free hinges.
    pub theta: Vec<f64>,
    /// N/m per translational DOF.
    pub ell: Vec<f64>,
}

/// Evaluates `K_p1(l)`, `K_p2(l)` and `K_r2(t)` at each joint's own
/// displacement. Free hinges report exactly zero.
pub fn eval_stiffness_scalars(params: &StiffnessParams, q: &JointState) -> Result<JointStiffness> {
    let mut theta = vec![0.0; q.theta.len()];
    let mut ell = vec![0.0; q.ell.len()];
    for (i, &t) in q.theta.iter().enumerate() {
        let slot = i % REV_PER_MODULE;
        theta[i] = match theta_slot_kind(slot) {
            JointKind::BendRevolute => 0.0,
            _ => {
                let k = params.kr2(t);
                if !(k > 0.0) {
                    return Err(Error::ParameterDomain(format!(
                        "K_r2({t:.4}) = {k:.3e} is not positive"
                    )));
                }
                k
            }
        };
    }
    for (i, &e) in q.ell.iter().enumerate() {
        let slot = i % PRIS_PER_MODULE;
        let k = match ell_slot_kind(slot) {
            JointKind::BendPrismatic => params.kp1(e),
            _ => params.kp2(e),
        };
        if !(k > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "prismatic stiffness at extension {e:.5} m is {k:.3e}"
            )));
        }
        ell[i] = k;
    }
    Ok(JointStiffness { theta, ell })
}

/// The joint stiffness matrix `K(q)`: diagonal, one entry per DOF in packed
/// order, positive on compliant joints and zero on the free hinges.
#[derive(Clone, Debug, PartialEq)]
pub struct StiffnessMatrix {
    diag: Vec<f64>,
    n_modules: usize,
}

impl StiffnessMatrix {
    /// Diagonal of the `dof × dof` matrix in packed `[theta; ell]` order.
    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn dof(&self) -> usize {
        self.diag.len()
    }

    /// Elastic restoring force `K(q)·q` in the secant form.
    pub fn apply(&self, q: &JointState) -> GeneralizedForces {
        let packed = q.packed();
        GeneralizedForces(
            self.diag
                .iter()
                .zip(packed.iter())
                .map(|(k, x)| k * x)
                .collect(),
        )
    }

    /// Number of exactly-zero diagonal entries (the free hinges).
    pub fn zero_entries(&self) -> usize {
        self.diag.iter().filter(|&&k| k == 0.0).count()
    }
}

/// Assembles `K(q)` from the per-joint scalars.
pub fn stiffness_matrix(params: &StiffnessParams, q: &JointState) -> Result<StiffnessMatrix> {
    let scalars = eval_stiffness_scalars(params, q)?;
    let mut diag = scalars.theta;
    diag.extend_from_slice(&scalars.ell);
    Ok(StiffnessMatrix {
        diag,
        n_modules: q.n_modules(),
    })
}

/// Total elastic potential energy consistent with the secant restoring force
/// `K(q)·q` (each diagonal stiffness depends only on its own coordinate).
pub fn elastic_energy(params: &StiffnessParams, q: &JointState) -> f64 {
    let mut e = 0.0;
    for (i, &t) in q.theta.iter().enumerate() {
        if theta_slot_kind(i % REV_PER_MODULE) == JointKind::TwistRevolute {
            e += poly_elastic_energy(&params.c, t);
        }
    }
    for (i, &x) in q.ell.iter().enumerate() {
        let coeffs = match ell_slot_kind(i % PRIS_PER_MODULE) {
            JointKind::BendPrismatic => &params.a,
            _ => &params.b,
        };
        e += poly_elastic_energy(coeffs, x);
    }
    e
}

// ---------------------------------------------------------------------------
// Forward kinematics
// ---------------------------------------------------------------------------

type Point = Vector3<f64>;

fn dir(angle: f64) -> Point {
    Vector3::new(angle.sin(), 0.0, angle.cos())
}

fn lateral(angle: f64) -> Point {
    Vector3::new(angle.cos(), 0.0, -angle.sin())
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum JointGeom {
    Rev { origin: Point },
    Pris { dir: Point },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct JointRecord {
    /// Index in the packed state vector.
    pub(crate) q_index: usize,
    pub(crate) geom: JointGeom,
}

/// A segment link, represented by its two endpoints; the centre of mass is
/// their midpoint, so jacobians and curvatures of the COM are the averages
/// of the endpoint ones.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LinkCom {
    pub(crate) mass: f64,
    pub(crate) start: Point,
    pub(crate) end: Point,
    /// Joints strictly upstream of `start`; `end` additionally moves with
    /// the segment's own prismatic joint at chain index `upstream`.
    pub(crate) upstream: usize,
}

/// World-frame kinematic snapshot of the chain at a state.
#[derive(Clone, Debug)]
pub struct Kinematics {
    /// Connector (rotary-shaft carrier) positions base..tip, `n_modules + 1`.
    pub connectors: Vec<Point>,
    /// Accumulated planar angle at each connector.
    pub connector_angles: Vec<f64>,
    /// Cable-site positions per cable, one per module.
    pub sites: [Vec<Point>; 2],
    /// Fixed routing anchors at the base connector, per cable.
    pub base_anchors: [Point; 2],
    /// Termination anchors on the tip connector, per cable.
    pub tip_anchors: [Point; 2],
    joints: Vec<JointRecord>,
    site_upstream: Vec<usize>,
    coms: Vec<LinkCom>,
    n_modules: usize,
}

impl Kinematics {
    /// Unchecked computation; callers outside the crate go through
    /// [`forward_kinematics`] which validates the state first.
    pub(crate) fn compute(cfg: &ChainConfig, q: &JointState) -> Kinematics {
        let n = cfg.n_modules;
        let a0 = cfg.segment_rest_length();
        let link_mass = cfg.link_mass();
        let n_rev = cfg.n_rev();

        let mut pos = Vector3::zeros();
        let mut ang = 0.0f64;
        let mut connectors = Vec::with_capacity(n + 1);
        let mut connector_angles = Vec::with_capacity(n + 1);
        let mut sites = [Vec::with_capacity(n), Vec::with_capacity(n)];
        let mut site_upstream = Vec::with_capacity(n);
        let mut joints = Vec::with_capacity(cfg.dof());
        let mut coms = Vec::with_capacity(cfg.n_pris());

        connectors.push(pos);
        connector_angles.push(ang);

        let base_lat = cfg.cable_sites[0].lateral;
        let base_anchors = [
            Vector3::new(base_lat, 0.0, 0.0),
            Vector3::new(-base_lat, 0.0, 0.0),
        ];

        for m in 0..n {
            for (pos_in_chain, elem) in MODULE_CHAIN.iter().enumerate() {
                match *elem {
                    ChainElem::Rev { slot } => {
                        let q_index = m * REV_PER_MODULE + slot;
                        joints.push(JointRecord {
                            q_index,
                            geom: JointGeom::Rev { origin: pos },
                        });
                        ang += q.theta[q_index];
                    }
                    ChainElem::Pris { slot } => {
                        let ell_index = m * PRIS_PER_MODULE + slot;
                        let q_index = n_rev + ell_index;
                        let d = dir(ang);
                        let len = a0 + q.ell[ell_index];
                        joints.push(JointRecord {
                            q_index,
                            geom: JointGeom::Pris { dir: d },
                        });
                        let start = pos;
                        pos += d * len;
                        coms.push(LinkCom {
                            mass: link_mass,
                            start,
                            end: pos,
                            upstream: m * DOF_PER_MODULE + pos_in_chain,
                        });
                    }
                }
                if pos_in_chain + 1 == SITE_CHAIN_POS {
                    let off = cfg.cable_sites[m];
                    let l = lateral(ang);
                    let d = dir(ang);
                    let base = pos + d * off.axial;
                    sites[0].push(base + l * off.lateral);
                    sites[1].push(base - l * off.lateral);
                    site_upstream.push(m * DOF_PER_MODULE + SITE_CHAIN_POS);
                }
            }
            connectors.push(pos);
            connector_angles.push(ang);
        }

        let tip_lat = cfg.cable_sites[n - 1].lateral;
        let l = lateral(ang);
        let tip_anchors = [pos + l * tip_lat, pos - l * tip_lat];

        Kinematics {
            connectors,
            connector_angles,
            sites,
            base_anchors,
            tip_anchors,
            joints,
            site_upstream,
            coms,
            n_modules: n,
        }
    }

    pub fn tip(&self) -> Point {
        self.connectors[self.n_modules]
    }

    fn n_joints(&self) -> usize {
        self.joints.len()
    }

    /// Adds `w · ∂p/∂q_j` to `grad[j]` for every joint `j` upstream of a
    /// recorded point `p`. This is the single building block behind gravity,
    /// cable and tip-load generalized forces.
    fn accumulate_point_wrench(&self, point: Point, upstream: usize, w: Point, grad: &mut [f64]) {
        for rec in &self.joints[..upstream] {
            match rec.geom {
                JointGeom::Rev { origin } => {
                    // Planar rotation about +y: dp/dθ = ŷ × (p − o).
                    grad[rec.q_index] +=
                        w.x * (point.z - origin.z) - w.z * (point.x - origin.x);
                }
                JointGeom::Pris { dir } => {
                    grad[rec.q_index] += w.dot(&dir);
                }
            }
        }
    }

    /// Routing polyline of one cable: base anchor, the module sites, tip
    /// anchor, each with the number of upstream joints (`0` for the fixed
    /// base anchor).
    fn cable_polyline(&self, cable: usize) -> Vec<(Point, usize)> {
        let mut pts = Vec::with_capacity(self.n_modules + 2);
        pts.push((self.base_anchors[cable], 0));
        for (i, &s) in self.sites[cable].iter().enumerate() {
            pts.push((s, self.site_upstream[i]));
        }
        pts.push((self.tip_anchors[cable], self.n_joints()));
        pts
    }

    /// Geometric path length of a cable through its routing points.
    pub fn cable_path_length(&self, cable: usize) -> f64 {
        let pts = self.cable_polyline(cable);
        pts.windows(2).map(|w| (w[1].0 - w[0].0).norm()).sum()
    }

    /// Adds `scale · ∂(path length)/∂q` to `grad`.
    pub(crate) fn accumulate_path_length_gradient(
        &self,
        cable: usize,
        scale: f64,
        grad: &mut [f64],
    ) {
        let pts = self.cable_polyline(cable);
        // Weight on each routing point: difference of the unit vectors of the
        // adjacent straight segments.
        for i in 0..pts.len() {
            let mut w = Vector3::zeros();
            if i > 0 {
                let seg = pts[i].0 - pts[i - 1].0;
                let n = seg.norm();
                if n > 0.0 {
                    w += seg / n;
                }
            }
            if i + 1 < pts.len() {
                let seg = pts[i + 1].0 - pts[i].0;
                let n = seg.norm();
                if n > 0.0 {
                    w -= seg / n;
                }
            }
            if pts[i].1 > 0 {
                self.accumulate_point_wrench(pts[i].0, pts[i].1, w * scale, grad);
            }
        }
    }

    /// Adds the gravity generalized force to `grad` and returns the
    /// gravitational potential energy.
    pub(crate) fn accumulate_gravity(
        &self,
        cfg: &ChainConfig,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let g = cfg.gravity;
        let mut energy = 0.0;
        match grad {
            Some(grad) => {
                for lc in &self.coms {
                    energy -= lc.mass * g.dot(&lc.point);
                    let w = -g * lc.mass;
                    self.accumulate_point_wrench(lc.point, lc.upstream, w, grad);
                    grad[lc.own_pris] += 0.5 * w.dot(&lc.dir);
                }
                if cfg.tip_payload_mass > 0.0 {
                    let tip = self.tip();
                    energy -= cfg.tip_payload_mass * g.dot(&tip);
                    let w = -g * cfg.tip_payload_mass;
                    self.accumulate_point_wrench(tip, self.n_joints(), w, grad);
                }
            }
            None => {
                for lc in &self.coms {
                    energy -= lc.mass * g.dot(&lc.point);
                }
                if cfg.tip_payload_mass > 0.0 {
                    energy -= cfg.tip_payload_mass * g.dot(&self.tip());
                }
            }
        }
        energy
    }

    /// Adds `−F · ∂p_tip/∂q` (the generalized force of a dead load `F`
    /// applied at the tip connector) to `grad`; returns the load potential.
    pub(crate) fn accumulate_tip_force(&self, force: Point, grad: Option<&mut [f64]>) -> f64 {
        let tip = self.tip();
        if let Some(grad) = grad {
            self.accumulate_point_wrench(tip, self.n_joints(), -force, grad);
        }
        -force.dot(&tip)
    }
}

/// Computes connector, cable-site and anchor poses for an admissible state.
pub fn forward_kinematics(cfg: &ChainConfig, q: &JointState) -> Result<Kinematics> {
    cfg.validate()?;
    cfg.check_state(q)?;
    Ok(Kinematics::compute(cfg, q))
}

// ---------------------------------------------------------------------------
// Cable metrics and generalized forces
// ---------------------------------------------------------------------------

/// Sum of distances between consecutive cable sites of the pulled cable
/// (cable 0). With a single module the metric falls back to the base-anchor
/// to site distance so it stays meaningful on oracle chains.
pub fn cable_site_gap(cfg: &ChainConfig, q: &JointState) -> Result<f64> {
    let kin = forward_kinematics(cfg, q)?;
    Ok(cable_site_gap_kin(&kin))
}

pub(crate) fn cable_site_gap_kin(kin: &Kinematics) -> f64 {
    let sites = &kin.sites[0];
    if sites.len() == 1 {
        return (sites[0] - kin.base_anchors[0]).norm();
    }
    sites.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Motor-side cable displacement (reel-in) per cable: how much cable the
/// motor has taken up relative to the straight pose. Bending towards a cable
/// shortens its routed path and reels it in.
pub fn cable_reel_in(cfg: &ChainConfig, q: &JointState) -> Result<[f64; 2]> {
    let kin = forward_kinematics(cfg, q)?;
    let kin0 = Kinematics::compute(cfg, &JointState::zero(cfg.n_modules));
    Ok([
        kin0.cable_path_length(0) - kin.cable_path_length(0),
        kin0.cable_path_length(1) - kin.cable_path_length(1),
    ])
}

/// Tendon jacobian `H_c(q)`: rows map joint rates to cable reel-in rates, so
/// `H_cᵀ u_c` is the generalized force a tension pair applies to the chain.
/// Computed by central finite differences of the routed path length with the
/// given step (native units).
pub fn cable_jacobian(cfg: &ChainConfig, q: &JointState, step: f64) -> Result<[Vec<f64>; 2]> {
    if !(step > 1e-12) {
        return Err(Error::config(format!(
            "finite-difference step {step:.3e} underflows"
        )));
    }
    cfg.validate()?;
    cfg.check_state(q)?;
    let dof = cfg.dof();
    let mut rows = [vec![0.0; dof], vec![0.0; dof]];
    let mut packed = q.packed();
    for i in 0..dof {
        let saved = packed[i];
        packed[i] = saved + step;
        let plus = Kinematics::compute(cfg, &JointState::from_packed(cfg.n_modules, &packed)?);
        packed[i] = saved - step;
        let minus = Kinematics::compute(cfg, &JointState::from_packed(cfg.n_modules, &packed)?);
        packed[i] = saved;
        for cable in 0..2 {
            // Reel-in is the negative of path length.
            rows[cable][i] = -(plus.cable_path_length(cable) - minus.cable_path_length(cable))
                / (2.0 * step);
        }
    }
    Ok(rows)
}

/// Analytic gravity generalized force `G(q) = ∂E_grav/∂q` with
/// `E_grav = −Σ mᵢ g·cᵢ(q)` over the segment links (plus any tip payload).
pub fn gravity_vector(cfg: &ChainConfig, q: &JointState) -> Result<GeneralizedForces> {
    let kin = forward_kinematics(cfg, q)?;
    let mut grad = vec![0.0; cfg.dof()];
    kin.accumulate_gravity(cfg, Some(&mut grad));
    Ok(GeneralizedForces(grad))
}

/// Gravitational potential energy at a state.
pub fn gravity_energy(cfg: &ChainConfig, q: &JointState) -> Result<f64> {
    let kin = forward_kinematics(cfg, q)?;
    Ok(kin.accumulate_gravity(cfg, None))
}
