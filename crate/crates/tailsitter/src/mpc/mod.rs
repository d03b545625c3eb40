//! Error-state MPC on the rotation manifold: error definitions, nonlinear
//! error dynamics, their linearization, the condensed box-constrained QP over
//! the horizon and the tracking controller built on them.
//!
//! Input deviations are `δu = u − u_d` throughout, so the box reads
//! `u_min − u_d ≤ δu ≤ u_max − u_d` and the command is `u_d + δu₀`.

mod qp;

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::aero::{AeroModel, ForceMode};
use crate::dynamics::{ControlInput, VehicleState};
use crate::flatness::ReferenceSample;
use crate::so3::{exp_coord_rate, exp_so3, log_so3_unchecked, skew};
use crate::{gravity, Mat3, Vec3};

pub use qp::{kkt_residual, solve_qp, BoxQp, QpSettings, QpSolution, QpStatus};

pub type Vec9 = SVector<f64, 9>;
pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat94 = SMatrix<f64, 9, 4>;
pub type Mat93 = SMatrix<f64, 9, 3>;

/// `[δp, δv, δθ]` with `δp = p_d − p`, `δv = v_d − v`, `δθ = Log(Rᵀ R_d)`.
pub fn error_state(x_d: &VehicleState, x: &VehicleState) -> Vec9 {
    let mut e = Vec9::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(x_d.p - x.p));
    e.fixed_rows_mut::<3>(3).copy_from(&(x_d.v - x.v));
    e.fixed_rows_mut::<3>(6).copy_from(&log_so3_unchecked(&(x.r.transpose() * x_d.r)));
    e
}

/// Reference state of a sample, with its body rate.
pub fn reference_state(s: &ReferenceSample) -> VehicleState {
    VehicleState { p: s.p, v: s.v, r: s.r, omega: s.omega }
}

/// Actual state whose error against `s` is `dx`.
pub fn state_from_error(s: &ReferenceSample, dx: &Vec9) -> VehicleState {
    let dth = Vec3::new(dx[6], dx[7], dx[8]);
    VehicleState {
        p: s.p - Vec3::new(dx[0], dx[1], dx[2]),
        v: s.v - Vec3::new(dx[3], dx[4], dx[5]),
        r: s.r * exp_so3(&dth).transpose(),
        omega: s.omega,
    }
}

fn acceleration(r: &Mat3, v: &Vec3, thrust: f64, wind: &Vec3, model: &AeroModel) -> Vec3 {
    let f = model.force(r, &(v - wind), ForceMode::Full);
    gravity() + thrust * r.column(0) + r * f / model.mass
}

/// Nonlinear error dynamics. The actual state and input are rebuilt from the
/// reference and `(dx, du)`; the actual vehicle sees `wind`, the reference was
/// built for `wind_bar`.
pub fn error_dynamics(
    dx: &Vec9,
    du: &Vector4<f64>,
    s: &ReferenceSample,
    wind: &Vec3,
    wind_bar: &Vec3,
    model: &AeroModel,
) -> Vec9 {
    let x = state_from_error(s, dx);
    let thrust = s.thrust + du[0];
    let omega = s.omega + Vec3::new(du[1], du[2], du[3]);
    let a_d = acceleration(&s.r, &s.v, s.thrust, wind_bar, model);
    let a = acceleration(&x.r, &x.v, thrust, wind, model);
    let dth = Vec3::new(dx[6], dx[7], dx[8]);
    let rate = exp_coord_rate(&dth, &(s.omega - s.r.transpose() * x.r * omega));
    let mut out = Vec9::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&dx.fixed_rows::<3>(3));
    out.fixed_rows_mut::<3>(3).copy_from(&(a_d - a));
    out.fixed_rows_mut::<3>(6).copy_from(&rate);
    out
}

/// Continuous-time error system linearized at one reference sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedErrorSystem {
    pub f_x: Mat9,
    /// Columns `[δa_T, δω]` for `δu = u − u_d`.
    pub f_u: Mat94,
    /// Response to the actual wind deviating from the surrogate.
    pub f_w: Mat93,
    pub m_t: Vec3,
    pub m_v: Mat3,
    pub m_r: Mat3,
}

pub fn linearize(s: &ReferenceSample, wind_bar: &Vec3, model: &AeroModel) -> LinearizedErrorSystem {
    let m = model.mass;
    let rd = s.r;
    let v_ab = rd.transpose() * (s.v - wind_bar);
    // the force Jacobian vanishes with airspeed
    let jf = if v_ab.norm() < 1e-9 { Mat3::zeros() } else { model.force_jacobian(&v_ab) };
    let f = model.force_body(&v_ab, ForceMode::Full);
    let m_t = rd.column(0).into_owned();
    let m_v = rd * jf * rd.transpose() / m;
    let psi = -skew(&(s.thrust * Vec3::x() + f / m)) + jf * skew(&v_ab) / m;
    let m_r = rd * psi;

    let mut f_x = Mat9::zeros();
    f_x.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    f_x.fixed_view_mut::<3, 3>(3, 3).copy_from(&m_v);
    f_x.fixed_view_mut::<3, 3>(3, 6).copy_from(&m_r);
    f_x.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-skew(&s.omega)));
    let mut f_u = Mat94::zeros();
    f_u.fixed_view_mut::<3, 1>(3, 0).copy_from(&(-m_t));
    f_u.fixed_view_mut::<3, 3>(6, 1).copy_from(&(-Mat3::identity()));
    let mut f_w = Mat93::zeros();
    f_w.fixed_view_mut::<3, 3>(3, 0).copy_from(&m_v);
    LinearizedErrorSystem { f_x, f_u, f_w, m_t, m_v, m_r }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Prediction step, s. It may span several control periods; the horizon
    /// then samples the reference at this spacing.
    pub dt: f64,
    /// Diagonal of `Q` for `[δp, δv, δθ]`.
    pub q: [f64; 9],
    /// Diagonal of `R` for `[δa_T, δω]`.
    pub r: [f64; 4],
    /// Diagonal of the terminal weight; `q` when absent.
    pub p: Option<[f64; 9]>,
    pub u_min: [f64; 4],
    pub u_max: [f64; 4],
    pub qp: QpSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 12,
            dt: 0.05,
            q: [1800.0, 1800.0, 1800.0, 5.0, 5.0, 5.0, 50.0, 50.0, 50.0],
            r: [0.3, 0.4, 0.4, 0.4],
            p: None,
            u_min: [0.0, -4.0, -4.0, -4.0],
            u_max: [20.0, 4.0, 4.0, 4.0],
            qp: QpSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    InvalidConfig(String),
    #[error("empty reference horizon")]
    EmptyHorizon,
}

impl MpcConfig {
    /// Weights for indoor SE(3) flight.
    pub fn indoor() -> Self {
        Self::default()
    }

    /// Outdoor flight: lower position weight.
    pub fn outdoor() -> Self {
        Self { q: [1200.0, 1200.0, 1200.0, 5.0, 5.0, 5.0, 50.0, 50.0, 50.0], ..Self::default() }
    }

    /// Aerobatics: lower position weight still, favoring attitude tracking.
    pub fn aerobatic() -> Self {
        Self { q: [900.0, 900.0, 900.0, 5.0, 5.0, 5.0, 50.0, 50.0, 50.0], ..Self::default() }
    }

    pub fn terminal(&self) -> [f64; 9] {
        self.p.unwrap_or(self.q)
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(MpcError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        let pos = |w: &[f64]| w.iter().all(|v| *v > 0.0 && v.is_finite());
        if !pos(&self.q) || !pos(&self.r) || !pos(&self.terminal()) {
            return Err(MpcError::InvalidConfig("weights must be positive".into()));
        }
        Ok(())
    }

    /// Multiplies every weight by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let mut c = self.clone();
        c.q.iter_mut().for_each(|v| *v *= lambda);
        c.r.iter_mut().for_each(|v| *v *= lambda);
        c.p = Some(self.terminal().map(|v| v * lambda));
        c
    }
}

/// Condensed QP over `δU = [δu₀; …; δu_{N−1}]`:
/// `min δUᵀ H δU + 2 fᵀ δU` with `H = R̄ + Γᵀ Q̄ Γ`, box bounds per step.
pub fn build_qp(horizon: &[ReferenceSample], dx0: &Vec9, wind_bar: &Vec3, model: &AeroModel, cfg: &MpcConfig) -> BoxQp {
    let n = cfg.horizon;
    let nu = 4 * n;
    let q = Mat9::from_diagonal(&Vec9::from(cfg.q));
    let p = Mat9::from_diagonal(&Vec9::from(cfg.terminal()));
    // state at step k = phi[k] δx₀ + gamma[k] δU
    let mut phi = Mat9::identity();
    let mut gamma = DMatrix::<f64>::zeros(9, nu);
    let mut h = DMatrix::<f64>::zeros(nu, nu);
    let mut f = DVector::<f64>::zeros(nu);
    let mut lo = DVector::<f64>::zeros(nu);
    let mut hi = DVector::<f64>::zeros(nu);
    for k in 0..n {
        let s = &horizon[k.min(horizon.len() - 1)];
        let lin = linearize(s, wind_bar, model);
        let a = Mat9::identity() + cfg.dt * lin.f_x;
        let b = cfg.dt * lin.f_u;
        let ud = s.input();
        for i in 0..4 {
            let (mut l, mut u) = (cfg.u_min[i] - ud[i], cfg.u_max[i] - ud[i]);
            if l > u {
                log::warn!("empty input box on channel {i} at step {k}, collapsed to a point");
                let mid = 0.5 * (l + u);
                l = mid;
                u = mid;
            }
            lo[4 * k + i] = l;
            hi[4 * k + i] = u;
            h[(4 * k + i, 4 * k + i)] += cfg.r[i];
        }
        // propagate to step k + 1
        let mut next = DMatrix::<f64>::zeros(9, nu);
        let a_d = DMatrix::from_column_slice(9, 9, a.as_slice());
        next.copy_from(&(&a_d * &gamma));
        for r in 0..9 {
            for c in 0..4 {
                next[(r, 4 * k + c)] += b[(r, c)];
            }
        }
        gamma = next;
        phi = a * phi;
        let w = if k + 1 == n { &p } else { &q };
        let w_d = DMatrix::from_column_slice(9, 9, w.as_slice());
        let wg = &w_d * &gamma;
        h += gamma.transpose() * &wg;
        let x0 = phi * dx0;
        f += wg.transpose() * DVector::from_column_slice(x0.as_slice());
    }
    // exact symmetry for the factorizations
    let h = (&h + h.transpose()) * 0.5;
    BoxQp { h, f, lo, hi }
}

/// Diagnostics of one control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcDiagnostics {
    /// QP objective `δUᵀHδU + 2fᵀδU` at the solution.
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub solve_time: f64,
    pub active_bounds: usize,
    pub status: QpStatus,
}

/// Tracking controller holding its configuration and a warm start.
#[derive(Debug, Clone)]
pub struct Mpc {
    pub config: MpcConfig,
    pub model: AeroModel,
    warm: Option<DVector<f64>>,
}

impl Mpc {
    pub fn new(config: MpcConfig, model: AeroModel) -> Result<Self, MpcError> {
        config.validate()?;
        Ok(Self { config, model, warm: None })
    }

    /// `u_cmd = u_d,0 + δu₀*`. A horizon shorter than `N` is padded with its
    /// last sample.
    pub fn control_step(
        &mut self,
        x: &VehicleState,
        horizon: &[ReferenceSample],
        wind_bar: &Vec3,
    ) -> Result<(ControlInput, MpcDiagnostics), MpcError> {
        let s0 = horizon.first().ok_or(MpcError::EmptyHorizon)?;
        let t0 = Instant::now();
        let dx0 = error_state(&reference_state(s0), x);
        let qp = build_qp(horizon, &dx0, wind_bar, &self.model, &self.config);
        let warm = self.warm.take().filter(|w| w.len() == qp.f.len()).map(|w| shift(&w));
        let sol = solve_qp(&qp, warm.as_ref(), &self.config.qp);
        let solve_time = t0.elapsed().as_secs_f64();
        if sol.status != QpStatus::Solved {
            log::warn!("MPC QP returned {:?} with KKT residual {:.3e}", sol.status, sol.kkt_residual);
        }
        let ud = s0.input();
        let mut u = ud + sol.x.fixed_rows::<4>(0);
        // the box already holds the command in range; clamp away rounding
        for i in 0..4 {
            u[i] = u[i].clamp(self.config.u_min[i].min(self.config.u_max[i]), self.config.u_max[i].max(self.config.u_min[i]));
        }
        let cost = qp.objective(&sol.x);
        let active = qp::active_count(&qp, &sol.x);
        self.warm = Some(sol.x);
        Ok((
            ControlInput::rates(u[0], Vec3::new(u[1], u[2], u[3])),
            MpcDiagnostics {
                cost,
                kkt_residual: sol.kkt_residual,
                iterations: sol.iterations,
                solve_time,
                active_bounds: active,
                status: sol.status,
            },
        ))
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }
}

/// Previous plan advanced by one step, last input repeated.
fn shift(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut out = DVector::zeros(n);
    out.rows_mut(0, n - 4).copy_from(&x.rows(4, n - 4));
    out.rows_mut(n - 4, 4).copy_from(&x.rows(n - 4, 4));
    out
}
