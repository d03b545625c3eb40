//! Piecewise 7th-order polynomials through intermediate points with fixed
//! start and end states up to jerk. Joints are continuous up to the 6th
//! derivative, which makes every segment the minimum-snap interpolant for the
//! given points and times.

use nalgebra::{DMatrix, SMatrix};

use super::banded::{BandedLu, BandedMatrix};
use super::{basis, BoundaryState, FlatTrajectory, Segment, TrajError};
use crate::Vec3;

const LOWER: usize = 8;
const UPPER: usize = 8;

/// Row of the interpolation condition at joint `i`. The order keeps every
/// diagonal entry structurally nonzero so elimination needs no pivoting.
fn position_row(i: usize) -> usize {
    8 * i + 7
}

/// Row of the derivative-`d` continuity condition at joint `i`.
fn continuity_row(i: usize, d: usize) -> usize {
    if d >= 4 {
        8 * i + d
    } else {
        8 * i + 8 + d
    }
}

#[derive(Debug, Clone)]
pub struct Minco {
    times: Vec<f64>,
    lu: BandedLu,
    /// Stacked coefficients, 8 rows per segment.
    coeffs: DMatrix<f64>,
}

fn set_row(a: &mut BandedMatrix, r: usize, col0: usize, vals: &[f64; 8], sign: f64) {
    for (j, v) in vals.iter().enumerate() {
        if *v != 0.0 {
            a.set(r, col0 + j, sign * v);
        }
    }
}

impl Minco {
    pub fn new(start: &BoundaryState, end: &BoundaryState, points: &[Vec3], times: &[f64]) -> Result<Self, TrajError> {
        let m = times.len();
        if m == 0 || points.len() + 1 != m {
            return Err(TrajError::InvalidInput(format!("{} points need {} durations, got {m}", points.len(), points.len() + 1)));
        }
        if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(TrajError::InvalidInput(format!("segment duration {t} is not positive")));
        }
        let n = 8 * m;
        let mut a = BandedMatrix::zeros(n, LOWER, UPPER);
        let mut b = DMatrix::zeros(n, 3);
        let s = [start.p, start.v, start.a, start.j];
        let e = [end.p, end.v, end.a, end.j];
        for k in 0..4 {
            set_row(&mut a, k, 0, &basis(k, 0.0), 1.0);
            b.row_mut(k).copy_from(&s[k].transpose());
        }
        for i in 0..m - 1 {
            let r0 = position_row(i);
            set_row(&mut a, r0, 8 * i, &basis(0, times[i]), 1.0);
            b.row_mut(r0).copy_from(&points[i].transpose());
            for d in 0..7 {
                let r = continuity_row(i, d);
                set_row(&mut a, r, 8 * i, &basis(d, times[i]), 1.0);
                set_row(&mut a, r, 8 * (i + 1), &basis(d, 0.0), -1.0);
            }
        }
        for k in 0..4 {
            set_row(&mut a, n - 4 + k, 8 * (m - 1), &basis(k, times[m - 1]), 1.0);
            b.row_mut(n - 4 + k).copy_from(&e[k].transpose());
        }
        let lu = a.factor(1e-14).map_err(|pivot| TrajError::Singular { pivot })?;
        lu.solve_mut(&mut b);
        Ok(Self { times: times.to_vec(), lu, coeffs: b })
    }

    pub fn segments(&self) -> usize {
        self.times.len()
    }

    pub fn coeffs(&self, i: usize) -> SMatrix<f64, 8, 3> {
        self.coeffs.fixed_view::<8, 3>(8 * i, 0).into_owned()
    }

    pub fn trajectory(&self) -> FlatTrajectory {
        FlatTrajectory {
            segments: (0..self.segments()).map(|i| Segment { coeffs: self.coeffs(i), duration: self.times[i] }).collect(),
        }
    }

    /// Chains `∂J/∂c` (stacked like the coefficients) back to the intermediate
    /// points and the durations. Returns `(∂J/∂q, ∂J/∂T)` where the duration
    /// gradient covers only the dependence through the coefficients.
    pub fn backward(&self, dj_dc: &DMatrix<f64>) -> (Vec<Vec3>, Vec<f64>) {
        let m = self.segments();
        let n = 8 * m;
        let mut lam = dj_dc.clone();
        self.lu.solve_transpose_mut(&mut lam);
        let lam_row = |r: usize| Vec3::new(lam[(r, 0)], lam[(r, 1)], lam[(r, 2)]);
        let deriv = |i: usize, d: usize| -> Vec3 {
            let c = self.coeffs(i);
            (c.transpose() * SMatrix::<f64, 8, 1>::from(basis(d, self.times[i]))).into()
        };
        let mut dq = Vec::with_capacity(m - 1);
        let mut dt = vec![0.0; m];
        for i in 0..m - 1 {
            let r0 = position_row(i);
            dq.push(lam_row(r0));
            // continuity rows hold p⁽ᵈ⁾(T) − next p⁽ᵈ⁾(0)
            let mut g = -lam_row(r0).dot(&deriv(i, 1));
            for d in 0..7 {
                g -= lam_row(continuity_row(i, d)).dot(&deriv(i, d + 1));
            }
            dt[i] = g;
        }
        for k in 0..4 {
            dt[m - 1] -= lam_row(n - 4 + k).dot(&deriv(m - 1, k + 1));
        }
        (dq, dt)
    }
}
