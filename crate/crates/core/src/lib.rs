//! Quasi-static modelling and fatigue analytics for a cable-driven continuum
//! robot built from hinge-beam modules with passive bend stoppers.
//!
//! The crate is organised around the stages of the fatigue-awareness pipeline:
//!
//! - [`prbm`] — the pseudo-rigid-body chain: configuration, joint state,
//!   polynomial joint stiffness, forward kinematics, tendon and gravity
//!   force maps.
//! - [`statics`] — constrained potential-energy equilibrium, the geometric
//!   limit pose and the end-stop torque.
//! - [`ident`] — stiffness identification from a recorded end-stop torque,
//!   the equivalent scalar stiffness and the monotone torque→stiffness
//!   surrogate.
//! - [`detect`] — limit-event detection on motor-side telemetry
//!   (displacement plateau plus torque-slope knee).
//! - [`fatigue`] — cycle history, trend analysis and fatigue-phase
//!   classification.
//! - [`geometry`] — closed-form stopper sizing and tip-drift metrics.
//! - [`synth`] — seeded ground-truth generators and brute-force oracles used
//!   by the test suites and the `synth` CLI subcommand.
//!
//! All quantities are SI internally (metres, newtons, radians); file formats
//! use millimetres for lengths and convert on the way in and out.

pub mod detect;
pub mod error;
pub mod fatigue;
pub mod geometry;
pub mod ident;
pub mod prbm;
pub mod statics;
pub mod synth;

mod optim;

pub use error::{Error, Result};
pub use prbm::{ChainConfig, GeneralizedForces, JointState, StiffnessParams};
pub use statics::EquilibriumResult;
