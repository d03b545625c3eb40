//! Trajectory optimization over piecewise 7th-order polynomials: the
//! interpolation system, the flatness-based objective with its analytic
//! gradient, an L-BFGS solver and boundary states for window traversal.

mod banded;
pub mod lbfgs;
mod minco;
mod objective;
mod traverse;

use std::path::Path;

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flatness::FlatSample;
use crate::Vec3;

pub use banded::{BandedLu, BandedMatrix};
pub use minco::Minco;
pub use objective::{
    objective_and_gradient, optimize, optimize_from, smooth_hinge, Bounds, Evaluation, PenaltyReport, PlanResult, PlanningProblem,
    Weights,
};
pub use traverse::{traverse_attitude, traverse_boundary_state, TraverseSpec};

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("invalid trajectory input: {0}")]
    InvalidInput(String),
    #[error("interpolation system is singular (pivot {pivot:.3e})")]
    Singular { pivot: f64 },
    #[error("cannot read or write trajectory file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse trajectory file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Position and its first three derivatives at a trajectory end.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundaryState {
    pub p: Vec3,
    #[serde(default)]
    pub v: Vec3,
    #[serde(default)]
    pub a: Vec3,
    #[serde(default)]
    pub j: Vec3,
}

impl BoundaryState {
    pub fn rest(p: Vec3) -> Self {
        Self { p, ..Default::default() }
    }
}

/// `d`-th derivative of the monomials `tʲ`, `j = 0..7`.
pub fn basis(d: usize, t: f64) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (j, o) in out.iter_mut().enumerate().skip(d) {
        let mut f = 1.0;
        for k in 0..d {
            f *= (j - k) as f64;
        }
        *o = f * t.powi((j - d) as i32);
    }
    out
}

/// One polynomial piece, `p(τ) = Σ cⱼ τʲ` for `τ ∈ [0, duration]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub coeffs: SMatrix<f64, 8, 3>,
    pub duration: f64,
}

impl Segment {
    pub fn derivative(&self, d: usize, tau: f64) -> Vec3 {
        let b = basis(d, tau);
        let mut out = Vec3::zeros();
        for (j, bj) in b.iter().enumerate().skip(d) {
            out += *bj * self.coeffs.row(j).transpose();
        }
        out
    }

    pub fn eval(&self, tau: f64) -> FlatSample {
        FlatSample {
            p: self.derivative(0, tau),
            v: self.derivative(1, tau),
            a: self.derivative(2, tau),
            j: self.derivative(3, tau),
            s: self.derivative(4, tau),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatTrajectory {
    pub segments: Vec<Segment>,
}

impl FlatTrajectory {
    /// Holds `p` for `duration` seconds.
    pub fn constant(p: Vec3, duration: f64) -> Self {
        let mut coeffs = SMatrix::<f64, 8, 3>::zeros();
        coeffs.set_row(0, &p.transpose());
        Self { segments: vec![Segment { coeffs, duration }] }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.duration).collect()
    }

    /// Active segment index and local time; `t` is clamped to the domain.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let total = self.duration();
        if !(0.0..=total).contains(&t) {
            log::warn!("trajectory time {t:.6} outside [0, {total:.6}], clamped");
        }
        let mut tau = t.clamp(0.0, total);
        for (i, s) in self.segments.iter().enumerate() {
            if tau < s.duration || i + 1 == self.segments.len() {
                return (i, tau.min(s.duration));
            }
            tau -= s.duration;
        }
        (0, 0.0)
    }

    pub fn eval(&self, t: f64) -> FlatSample {
        if self.segments.is_empty() {
            return FlatSample::default();
        }
        let (i, tau) = self.locate(t);
        self.segments[i].eval(tau)
    }

    pub fn start(&self) -> BoundaryState {
        let s = self.eval(0.0);
        BoundaryState { p: s.p, v: s.v, a: s.a, j: s.j }
    }

    pub fn end(&self) -> BoundaryState {
        let s = self.eval(self.duration());
        BoundaryState { p: s.p, v: s.v, a: s.a, j: s.j }
    }

    pub fn append(&mut self, other: &FlatTrajectory) {
        self.segments.extend_from_slice(&other.segments);
    }

    pub fn to_file(&self) -> TrajectoryFile {
        TrajectoryFile {
            segments: self
                .segments
                .iter()
                .map(|s| SegmentFile {
                    duration: s.duration,
                    coefficients: (0..8).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| s.coeffs[(r, c)]).collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrajError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrajError> {
        let f: TrajectoryFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        f.try_into()
    }
}

/// On-disk trajectory: per-segment row-major 8×3 coefficients and duration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub segments: Vec<SegmentFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentFile {
    pub duration: f64,
    pub coefficients: Vec<f64>,
}

impl TryFrom<TrajectoryFile> for FlatTrajectory {
    type Error = TrajError;

    fn try_from(f: TrajectoryFile) -> Result<Self, TrajError> {
        let mut segments = Vec::with_capacity(f.segments.len());
        for s in f.segments {
            if s.coefficients.len() != 24 {
                return Err(TrajError::InvalidInput(format!("segment has {} coefficients, expected 24", s.coefficients.len())));
            }
            if !(s.duration > 0.0) {
                return Err(TrajError::InvalidInput(format!("segment duration {} is not positive", s.duration)));
            }
            segments.push(Segment { coeffs: SMatrix::<f64, 8, 3>::from_row_slice(&s.coefficients), duration: s.duration });
        }
        Ok(Self { segments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_derivatives() {
        assert_eq!(basis(0, 2.0), [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0]);
        assert_eq!(basis(3, 1.0), [0.0, 0.0, 0.0, 6.0, 24.0, 60.0, 120.0, 210.0]);
        assert_eq!(basis(2, 0.0)[2], 2.0);
    }

    #[test]
    fn derivatives_match_differences() {
        let mut coeffs = SMatrix::<f64, 8, 3>::zeros();
        for r in 0..8 {
            for c in 0..3 {
                coeffs[(r, c)] = ((r * 3 + c) as f64).sin();
            }
        }
        let seg = Segment { coeffs, duration: 1.5 };
        let h = 1e-6;
        for d in 0..4 {
            let fd = (seg.derivative(d, 0.7 + h) - seg.derivative(d, 0.7 - h)) / (2.0 * h);
            assert!((fd - seg.derivative(d + 1, 0.7)).norm() < 1e-6 * fd.norm().max(1.0));
        }
    }

    #[test]
    fn file_round_trip() {
        let mut t = FlatTrajectory::constant(Vec3::new(1.0, 2.0, 3.0), 2.0);
        t.segments[0].coeffs[(5, 1)] = 0.25;
        let back: FlatTrajectory = t.to_file().try_into().unwrap();
        assert_eq!(back, t);
        let (i, tau) = t.locate(5.0);
        assert_eq!((i, tau), (0, 2.0));
    }
}
