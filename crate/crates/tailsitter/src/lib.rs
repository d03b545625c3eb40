//! Flight software for tail-sitter VTOL aircraft: aerodynamic and rigid-body
//! models, a differential-flatness transform from position trajectories to
//! full state and input references, minimum-snap trajectory optimization, and
//! an on-manifold error-state MPC tracker.

pub mod aero;
pub mod dynamics;
pub mod flatness;
pub mod harness;
pub mod mpc;
pub mod so3;
pub mod traj_opt;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Gravity in the NED world frame.
pub const GRAVITY: f64 = 9.8;

pub fn gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, GRAVITY)
}
