//! Rotation-group primitives: hat/vee maps, exponential and logarithm on SO(3),
//! and the Jacobian of exponential coordinates.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::{Mat3, Vec3};

const EXP_TAYLOR_EPS: f64 = 1e-8;
const JAC_TAYLOR_EPS: f64 = 1e-6;
const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("matrix is not a rotation: orthonormality error {ortho:.3e}, det {det:.9}")]
    NotARotation { ortho: f64, det: f64 },
}

pub fn skew(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Mat3) -> Vec3 {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn exp_so3(theta: &Vec3) -> Mat3 {
    let n = theta.norm();
    let k = skew(theta);
    if n < EXP_TAYLOR_EPS {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = n.sin() / n;
    let b = (1.0 - n.cos()) / (n * n);
    Mat3::identity() + a * k + b * k * k
}

/// Frobenius norm of `RᵀR − I` and the determinant.
pub fn rotation_defect(r: &Mat3) -> (f64, f64) {
    ((r.transpose() * r - Mat3::identity()).norm(), r.determinant())
}

pub fn check_rotation(r: &Mat3, tol: f64) -> Result<(), So3Error> {
    let (ortho, det) = rotation_defect(r);
    if ortho > tol || (det - 1.0).abs() > tol || !ortho.is_finite() {
        return Err(So3Error::NotARotation { ortho, det });
    }
    Ok(())
}

/// Logarithm map. The returned vector has norm in `[0, π]`; at exactly π the
/// axis is chosen with a nonnegative first nonzero component.
pub fn log_so3(r: &Mat3) -> Result<Vec3, So3Error> {
    check_rotation(r, ROTATION_TOL)?;
    Ok(log_so3_unchecked(r))
}

pub fn log_so3_unchecked(r: &Mat3) -> Vec3 {
    let w = vee(&(r - r.transpose())); // 2 sinθ · axis
    let s = 0.5 * w.norm();
    let c = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    let angle = s.atan2(c);

    if c > -0.9 {
        // θ/(2 sinθ), with the series near zero
        let f = if angle < 1e-4 {
            0.5 + angle * angle / 12.0
        } else {
            0.5 * angle / angle.sin()
        };
        return f * w;
    }

    // Near π: axis from the symmetric part, sign from the skew part.
    let sym = 0.5 * (r + r.transpose()) - c * Mat3::identity();
    let d = sym.diagonal();
    let i = if d.x >= d.y && d.x >= d.z {
        0
    } else if d.y >= d.z {
        1
    } else {
        2
    };
    let mut axis: Vec3 = sym.column(i).into();
    axis /= axis.norm();
    if s < 1e-12 {
        axis = canonical_sign(axis);
    } else if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    angle * axis
}

fn canonical_sign(a: Vec3) -> Vec3 {
    for k in 0..3 {
        if a[k] != 0.0 {
            return if a[k] < 0.0 { -a } else { a };
        }
    }
    a
}

/// Jacobian of exponential coordinates,
/// `A(θ) = I + (1−cos n)/n² [θ] + (n − sin n)/n³ [θ]²`.
///
/// With `R(t) = Exp(θ(t))` and body rate `ω`, the kinematics read `A(θ)ᵀ θ̇ = ω`.
pub fn jacobian_a(theta: &Vec3) -> Mat3 {
    let n = theta.norm();
    let k = skew(theta);
    if n < JAC_TAYLOR_EPS {
        return Mat3::identity() + 0.5 * k + k * k / 6.0;
    }
    let n2 = n * n;
    Mat3::identity() + (1.0 - n.cos()) / n2 * k + (n - n.sin()) / (n2 * n) * k * k
}

/// `θ̇` for body rate `ω`, i.e. `A(θ)⁻ᵀ ω`.
pub fn exp_coord_rate(theta: &Vec3, omega: &Vec3) -> Vec3 {
    let at = jacobian_a(theta).transpose();
    at.lu().solve(omega).unwrap_or(*omega)
}

/// Closest rotation in the Frobenius sense (polar factor).
pub fn orthonormalize(r: &Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut q = u * vt;
    if q.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        q = u2 * vt;
    }
    q
}

/// Geodesic distance between two rotations in radians.
pub fn rotation_distance(a: &Mat3, b: &Mat3) -> f64 {
    log_so3_unchecked(&(a.transpose() * b)).norm()
}
