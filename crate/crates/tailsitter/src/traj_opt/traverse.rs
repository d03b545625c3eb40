//! Boundary state at a window traverse: attitude fixed by the window
//! geometry, thrust chosen to minimize the traverse acceleration.

use serde::{Deserialize, Serialize};

use super::{BoundaryState, TrajError};
use crate::aero::{AeroModel, ForceMode};
use crate::so3::exp_so3;
use crate::{gravity, Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraverseSpec {
    /// Window center, m.
    pub center: Vec3,
    /// Direction of the long edge; body y is aligned with it.
    pub long_edge: Vec3,
    /// Traverse velocity, normal to the window plane, m/s.
    pub velocity: Vec3,
    /// Angle of attack at the traverse, degrees.
    #[serde(default = "default_aoa")]
    pub aoa_deg: f64,
}

fn default_aoa() -> f64 {
    30.0
}

impl TraverseSpec {
    pub fn validate(&self) -> Result<(), TrajError> {
        let v = self.velocity.norm();
        if !(v > 0.0) {
            return Err(TrajError::InvalidInput("traverse speed must be positive".into()));
        }
        let e = self.long_edge.norm();
        if !(e > 0.0) || self.long_edge.cross(&self.velocity).norm() < 1e-6 * e * v {
            return Err(TrajError::InvalidInput("long edge must not be parallel to the traverse velocity".into()));
        }
        Ok(())
    }
}

/// Attitude at the traverse. `y_b` is the long edge projected normal to the
/// air velocity, signed so that the body z axis does not point up.
pub fn traverse_attitude(spec: &TraverseSpec, wind: &Vec3) -> Mat3 {
    let v_a = spec.velocity - wind;
    let vh = v_a.normalize();
    let edge = spec.long_edge - spec.long_edge.dot(&vh) * vh;
    let build = |y: Vec3| {
        let x = exp_so3(&(spec.aoa_deg.to_radians() * y)) * vh;
        Mat3::from_columns(&[x, y, x.cross(&y)])
    };
    let r = build(edge.normalize());
    if r.column(2).dot(&Vec3::z()) >= 0.0 {
        r
    } else {
        build(-edge.normalize())
    }
}

/// Window boundary state `(p, v, v̇, 0)` with the thrust that minimizes
/// `‖v̇‖` over `[thrust_min, thrust_max]`. Returns the attitude and thrust too.
pub fn traverse_boundary_state(
    spec: &TraverseSpec,
    model: &AeroModel,
    wind: &Vec3,
    thrust_min: f64,
    thrust_max: f64,
) -> Result<(BoundaryState, Mat3, f64), TrajError> {
    spec.validate()?;
    if thrust_min > thrust_max {
        return Err(TrajError::InvalidInput(format!("thrust bounds [{thrust_min}, {thrust_max}] are empty")));
    }
    let r = traverse_attitude(spec, wind);
    let f = model.force(&r, &(spec.velocity - wind), ForceMode::Coordinated);
    let free = -(r.transpose() * gravity() + f / model.mass).x;
    let thrust = free.clamp(thrust_min, thrust_max);
    let a = gravity() + thrust * r.column(0) + r * f / model.mass;
    Ok((BoundaryState { p: spec.center, v: spec.velocity, a, j: Vec3::zeros() }, r, thrust))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TraverseSpec {
        TraverseSpec {
            center: Vec3::new(10.0, 0.0, -3.0),
            long_edge: Vec3::new(0.0, 1.0, -1.0),
            velocity: Vec3::new(10.0, 0.0, 0.0),
            aoa_deg: 30.0,
        }
    }

    #[test]
    fn hover_aligned_without_aero() {
        let m = AeroModel::flat_plate().with_half_rho_s(0.0);
        // air velocity straight down and no angle of attack: body x points up
        let s = TraverseSpec { velocity: Vec3::new(0.0, 0.0, 1.0), long_edge: Vec3::y(), aoa_deg: 0.0, ..spec() };
        let mut sp = s;
        sp.velocity = Vec3::new(0.0, 0.0, 1.0);
        let (b, r, t) = traverse_boundary_state(&sp, &m, &Vec3::new(0.0, 0.0, 2.0), 0.0, 20.0).unwrap();
        assert!((r.column(0) + Vec3::z()).norm() < 1e-12);
        assert!((t - 9.8).abs() < 1e-12);
        assert!(b.a.norm() < 1e-12);
    }

    #[test]
    fn attitude_geometry() {
        let s = spec();
        let r = traverse_attitude(&s, &Vec3::zeros());
        assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
        let y = r.column(1).into_owned();
        assert!(y.cross(&s.long_edge.normalize()).norm() < 1e-12);
        assert!(r.column(2).z >= 0.0);
        let air = crate::aero::airflow_angles(&(r.transpose() * s.velocity));
        assert!((air.alpha - 30f64.to_radians()).abs() < 1e-12 && air.beta.abs() < 1e-12);
    }

    #[test]
    fn thrust_minimizes_acceleration_on_grid() {
        let m = AeroModel::flat_plate();
        let s = spec();
        let (b, r, t) = traverse_boundary_state(&s, &m, &Vec3::zeros(), 6.0, 16.0).unwrap();
        let f = m.force(&r, &s.velocity, ForceMode::Coordinated);
        let acc = |a_t: f64| (gravity() + a_t * r.column(0) + r * f / m.mass).norm();
        let mut best = (f64::INFINITY, 0.0);
        let mut a_t = 6.0;
        while a_t <= 16.0 + 1e-12 {
            if acc(a_t) < best.0 {
                best = (acc(a_t), a_t);
            }
            a_t += 1e-4;
        }
        assert!((t - best.1).abs() <= 1e-4);
        assert!((b.a.norm() - acc(t)).abs() < 1e-12);
        assert_eq!(b.j, Vec3::zeros());
    }

    #[test]
    fn clamps_to_nearer_bound() {
        let m = AeroModel::flat_plate();
        let (_, _, t) = traverse_boundary_state(&spec(), &m, &Vec3::zeros(), 15.0, 16.0).unwrap();
        assert_eq!(t, 15.0);
        let (_, _, t) = traverse_boundary_state(&spec(), &m, &Vec3::zeros(), 0.0, 0.5).unwrap();
        assert_eq!(t, 0.5);
    }
}
