//! Differential-flatness transform: flat-output derivatives plus a surrogate
//! wind to attitude, thrust, body rates, angular accelerations and torque.
//!
//! Three branches are handled. In coordinated flight the body y axis is normal
//! to both the air velocity and the special acceleration `v̇ − g`. When the
//! airspeed is small the aerodynamic force is neglected and the thrust axis is
//! aligned with `v̇ − g`. When the air velocity is nearly parallel to `v̇ − g`
//! the y axis is taken from a frozen body z axis and the coordinated force
//! balance is applied to the in-plane component of the air velocity.

mod gradients;

use std::f64::consts::{FRAC_PI_4, PI};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aero::{airflow_angles, AeroModel};
use crate::dynamics::WindSample;
use crate::so3::{exp_so3, skew};
use crate::{gravity, Mat3, Vec3};

pub use gradients::{flatness_gradients, infeasibility_gap, transform_with_gradient, InputGradient};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlatnessError {
    #[error("free fall: |v' - g| = {0:.3e}")]
    FreeFall(f64),
    #[error("no angle of attack balances the forces (h = {h:.4}, gamma = {gamma:.4}, gap = {gap:.3e})")]
    NoRoot { h: f64, gamma: f64, gap: f64 },
    #[error("rate equations singular: det N = {det:.3e} in {branch:?} branch")]
    SingularN { det: f64, branch: Branch },
    #[error("frozen body z axis is parallel to v' - g")]
    DegenerateFix,
    #[error("zero airspeed")]
    ZeroAirspeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Coordinated,
    LowAirspeed,
    SmallGamma,
}

impl Branch {
    pub fn code(self) -> u8 {
        match self {
            Branch::Coordinated => 0,
            Branch::LowAirspeed => 1,
            Branch::SmallGamma => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Branch::Coordinated),
            1 => Some(Branch::LowAirspeed),
            2 => Some(Branch::SmallGamma),
            _ => None,
        }
    }
}

/// Position and its first four time derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlatSample {
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    pub j: Vec3,
    pub s: Vec3,
}

impl FlatSample {
    pub fn hover(p: Vec3) -> Self {
        Self { p, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessConfig {
    pub v_min: f64,
    /// Radians.
    pub gamma_min: f64,
    pub free_fall_eps: f64,
    pub det_threshold: f64,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        Self { v_min: 0.5, gamma_min: 5f64.to_radians(), free_fall_eps: 1e-3, det_threshold: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatnessCache {
    /// Previous body x axis; seeds the angle-of-attack root search.
    pub x_b_prev: Option<Vec3>,
    pub y_b_prev: Vec3,
    pub z_b_fix: Vec3,
    pub alpha_prev: f64,
    pub branch_prev: Option<Branch>,
}

impl FlatnessCache {
    pub fn from_attitude(r0: &Mat3) -> Self {
        Self {
            x_b_prev: Some(r0.column(0).normalize()),
            y_b_prev: r0.column(1).normalize(),
            z_b_fix: r0.column(2).normalize(),
            alpha_prev: 0.0,
            branch_prev: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub r: Mat3,
    pub thrust: f64,
    pub omega: Vec3,
    pub thrust_rate: f64,
    pub thrust_accel: f64,
    pub omega_dot: Vec3,
    pub torque: Vec3,
    pub alpha: f64,
    pub gamma: f64,
    pub branch: Branch,
    /// Surrogate wind used to build this sample.
    pub wind: Vec3,
}

impl ReferenceSample {
    /// `[a_T, ω]`.
    pub fn input(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.omega.x, self.omega.y, self.omega.z)
    }
}

/// Intermediate quantities of one transform evaluation.
#[derive(Debug, Clone)]
pub struct TransformDetail {
    pub reference: ReferenceSample,
    pub n: Matrix4<f64>,
    pub h: Vector4<f64>,
    pub n_dot: Matrix4<f64>,
    pub h_dot: Vector4<f64>,
    /// Determinant of `N` from the branch's closed form.
    pub det_closed_form: f64,
    /// `∂F/∂α` of the angle-of-attack equation (planar branches).
    pub df_dalpha: f64,
    /// `ψ₂₃` entry of the body-frame rate matrix (planar branches).
    pub psi23: f64,
    /// Aerodynamic force (body axes) assumed by the branch.
    pub force: Vec3,
    pub cache_out: FlatnessCache,
}

pub fn residual_f(model: &AeroModel, h: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let cv = model.coeff_vector(alpha);
    let s = gamma - alpha;
    (h * s.sin() + cv.c.z, -h * s.cos() + cv.dc_da.z)
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

fn angle_dist(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Solves `h sin(γ − α) + c_z(α) = 0` for the root nearest `alpha_prev`.
pub fn solve_alpha(h: f64, gamma: f64, alpha_prev: f64, model: &AeroModel) -> Result<f64, FlatnessError> {
    const TOL: f64 = 1e-10;
    let mut a = alpha_prev;
    let mut newton = None;
    for _ in 0..50 {
        let (f, df) = residual_f(model, h, gamma, a);
        if f.abs() < TOL {
            // one more step takes the residual to rounding level
            newton = Some(if df != 0.0 { a - f / df } else { a });
            break;
        }
        if !(df.abs() > 1e-300) || !f.is_finite() {
            break;
        }
        let step = f / df;
        a -= step;
        if !(-PI - 0.5..=PI + 0.5).contains(&(a - alpha_prev + wrap_angle(alpha_prev))) || step.abs() > PI {
            break;
        }
    }
    if let Some(a) = newton {
        // A far jump may skip over a nearer root; confirm with the scan.
        if angle_dist(a, alpha_prev) < 0.1 {
            return Ok(wrap_angle(a));
        }
    }
    scan_alpha(h, gamma, alpha_prev, model, newton)
}

fn scan_alpha(h: f64, gamma: f64, alpha_prev: f64, model: &AeroModel, newton: Option<f64>) -> Result<f64, FlatnessError> {
    let n = 360;
    let step = 2.0 * PI / n as f64;
    let grid: Vec<f64> = (0..=n).map(|i| -PI + i as f64 * step).collect();
    let vals: Vec<f64> = grid.iter().map(|a| residual_f(model, h, gamma, *a).0).collect();
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..n {
        let (fa, fb) = (vals[i], vals[i + 1]);
        if fa == 0.0 || fa.signum() != fb.signum() {
            let d = angle_dist(0.5 * (grid[i] + grid[i + 1]), alpha_prev);
            if best.map_or(true, |b| d < b.0) {
                best = Some((d, grid[i], grid[i + 1]));
            }
        }
    }
    if let (Some(a), Some(b)) = (newton, best) {
        if angle_dist(a, alpha_prev) <= b.0 + step {
            return Ok(wrap_angle(a));
        }
    }
    let Some((_, mut lo, mut hi)) = best else {
        let gap = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        return Err(FlatnessError::NoRoot { h, gamma, gap });
    };
    let mut flo = residual_f(model, h, gamma, lo).0;
    if flo == 0.0 {
        return Ok(wrap_angle(lo));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = residual_f(model, h, gamma, mid).0;
        if fm.abs() < 1e-12 || hi - lo < 1e-15 {
            lo = mid;
            break;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let mut a = lo;
    for _ in 0..3 {
        let (f, df) = residual_f(model, h, gamma, a);
        if f.abs() < 1e-13 || df == 0.0 {
            break;
        }
        a -= f / df;
    }
    Ok(wrap_angle(a))
}

/// `γ = r·atan2(‖sp × v_a‖, sp·v_a)`.
pub fn compute_gamma(v_a: &Vec3, sp: &Vec3, r: f64) -> Result<f64, FlatnessError> {
    if v_a.norm() == 0.0 {
        return Err(FlatnessError::ZeroAirspeed);
    }
    Ok(r * sp.cross(v_a).norm().atan2(sp.dot(v_a)))
}

/// Body y axis normal to `v_a` and `sp`, with the sign kept close to `y_prev`.
pub fn select_yb(v_a: &Vec3, sp: &Vec3, y_prev: &Vec3) -> Option<(Vec3, f64)> {
    let k = v_a.cross(sp);
    let n = k.norm();
    if n == 0.0 {
        return None;
    }
    let r = if k.dot(y_prev) >= 0.0 { 1.0 } else { -1.0 };
    Some((r * k / n, r))
}

/// Branch selection from airspeed and the angle between `v_a` and `v̇ − g`.
pub fn select_branch(v_a: &Vec3, sp: &Vec3, cfg: &FlatnessConfig) -> Branch {
    let va = v_a.norm();
    if va < cfg.v_min {
        return Branch::LowAirspeed;
    }
    if v_a.cross(sp).norm() < cfg.gamma_min.sin() * va * sp.norm() {
        Branch::SmallGamma
    } else {
        Branch::Coordinated
    }
}

pub(crate) struct Inputs {
    pub sp: Vec3,
    pub v_a: Vec3,
    pub dv_a: Vec3,
    pub ddv_a: Vec3,
    pub jerk: Vec3,
    pub snap: Vec3,
}

impl Inputs {
    fn new(sample: &FlatSample, wind: &WindSample) -> Self {
        Self {
            sp: sample.a - gravity(),
            v_a: sample.v - wind.w,
            dv_a: sample.a - wind.dw,
            ddv_a: sample.j - wind.ddw,
            jerk: sample.j,
            snap: sample.s,
        }
    }
}

/// State shared by the branch computations.
#[derive(Debug, Clone)]
pub(crate) struct Core {
    pub branch: Branch,
    pub r: Mat3,
    pub y: Vec3,
    pub sign_r: f64,
    pub thrust: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// In-plane airspeed and body air velocity (planar branches).
    pub airspeed: f64,
    pub vbar: Vec3,
    pub force: Vec3,
    pub jf: Mat3,
    pub psi: Mat3,
    pub df_dalpha: f64,
    /// `‖z_fix × sp‖` (fixed-axis branches).
    pub k_fix: f64,
    /// Rate of the in-plane air velocity `u`; equals `v̇_a` in coordinated flight.
    pub u_dot: Vec3,
    pub n: Matrix4<f64>,
    pub h: Vector4<f64>,
    pub det_closed_form: f64,
}

fn stack_n(row0: [f64; 3], col0: Vec3, block: Mat3) -> Matrix4<f64> {
    let mut n = Matrix4::zeros();
    for c in 0..3 {
        n[(0, c + 1)] = row0[c];
    }
    for r in 0..3 {
        n[(r + 1, 0)] = col0[r];
        for c in 0..3 {
            n[(r + 1, c + 1)] = block[(r, c)];
        }
    }
    n
}

fn fixed_axis_y(sp: &Vec3, z_fix: &Vec3) -> Result<(Vec3, f64), FlatnessError> {
    let k = z_fix.cross(sp);
    let kn = k.norm();
    if kn < 1e-6 * sp.norm().max(1e-12) {
        return Err(FlatnessError::DegenerateFix);
    }
    Ok((k / kn, kn))
}

/// `ẏ` and `ÿ` of `y = (z_fix × sp)/‖z_fix × sp‖`.
pub(crate) fn fixed_axis_rates(inp: &Inputs, z_fix: &Vec3, y: &Vec3, k: f64) -> (Vec3, Vec3) {
    let kd = z_fix.cross(&inp.jerk);
    let kdd = z_fix.cross(&inp.snap);
    let ykd = y.dot(&kd);
    let yd = (kd - ykd * y) / k;
    let ydd = (kdd - ykd * yd - (yd.dot(&kd) + y.dot(&kdd)) * y) / k - ykd / k * yd;
    (yd, ydd)
}

/// Second derivative of `u = v_a − (v_a·y) y` given `ẏ`, `ÿ`.
fn in_plane_accel(inp: &Inputs, y: &Vec3, yd: &Vec3, ydd: &Vec3) -> Vec3 {
    let s1 = inp.dv_a.dot(y) + inp.v_a.dot(yd);
    inp.ddv_a
        - (inp.ddv_a.dot(y) + 2.0 * inp.dv_a.dot(yd) + inp.v_a.dot(ydd)) * y
        - 2.0 * s1 * yd
        - inp.v_a.dot(y) * ydd
}

pub(crate) fn core(
    inp: &Inputs,
    cache: &FlatnessCache,
    model: &AeroModel,
    cfg: &FlatnessConfig,
) -> Result<Core, FlatnessError> {
    let sp_n = inp.sp.norm();
    if sp_n < cfg.free_fall_eps {
        return Err(FlatnessError::FreeFall(sp_n));
    }
    let branch = select_branch(&inp.v_a, &inp.sp, cfg);
    if branch == Branch::LowAirspeed {
        return low_airspeed_core(inp, cache, cfg);
    }

    let (y, sign_r, k_fix) = match branch {
        Branch::Coordinated => {
            let (y, r) = select_yb(&inp.v_a, &inp.sp, &cache.y_b_prev).ok_or(FlatnessError::ZeroAirspeed)?;
            (y, r, 0.0)
        }
        _ => {
            let (y, k) = fixed_axis_y(&inp.sp, &cache.z_b_fix)?;
            (y, 1.0, k)
        }
    };

    let u = inp.v_a - inp.v_a.dot(&y) * y;
    let u_dot = if branch == Branch::Coordinated {
        inp.dv_a
    } else {
        let (yd, _) = fixed_axis_rates(inp, &cache.z_b_fix, &y, k_fix);
        inp.dv_a - (inp.dv_a.dot(&y) + inp.v_a.dot(&yd)) * y - inp.v_a.dot(&y) * yd
    };
    let vn = u.norm();
    let uhat = u / vn;
    let gamma = y.dot(&u.cross(&inp.sp)).atan2(u.dot(&inp.sp));
    let q = model.half_rho_s();
    let m = model.mass;
    let h_coef = if q > 0.0 { m * sp_n / (q * vn * vn) } else { f64::INFINITY };
    // Root nearest the previous attitude. Measured against the current
    // airflow, so it stays right when the air velocity swings through zero.
    let hint = cache
        .x_b_prev
        .and_then(|xp| {
            let (c, s) = (uhat.dot(&xp), y.dot(&uhat.cross(&xp)));
            (c.hypot(s) > 1e-6).then(|| s.atan2(c))
        })
        .unwrap_or(cache.alpha_prev);
    let thrust_at = |a: f64| sp_n * (gamma - a).cos() - q * vn * vn * model.coeff_vector(a).c.x / m;
    let alpha = if h_coef.is_finite() {
        let a = solve_alpha(h_coef, gamma, hint, model)?;
        // Roots come in pairs about half a turn apart with opposite thrust.
        // When the previous attitude is too far from the nearest root to
        // tell them apart (coarse sampling), prefer the one the propeller
        // can produce.
        if thrust_at(a) < 0.0 && angle_dist(a, hint) > FRAC_PI_4 {
            match solve_alpha(h_coef, gamma, a + PI, model) {
                Ok(b) if thrust_at(b) >= 0.0 => b,
                _ => a,
            }
        } else {
            a
        }
    } else {
        gamma
    };
    let x = exp_so3(&(alpha * y)) * uhat;
    let z = x.cross(&y);
    let r = Mat3::from_columns(&[x, y, z]);
    let cv = model.coeff_vector(alpha);
    let force = q * vn * vn * cv.c;
    let thrust = thrust_at(alpha);
    let vbar = vn * Vec3::new(alpha.cos(), 0.0, alpha.sin());
    let jf = model.force_jacobian(&vbar);
    let e1 = Vec3::x();
    let psi = -skew(&(thrust * e1 + force / m)) + jf * skew(&vbar) / m;
    let df_dalpha = if h_coef.is_finite() { -h_coef * (gamma - alpha).cos() + cv.dc_da.z } else { 1.0 };
    let qv = q * vn * vn / m;
    // qV²/m · ∂F/∂α, finite also when q = 0
    let g_alpha = -sp_n * (gamma - alpha).cos() + qv * cv.dc_da.z;

    let (row0, h1, det) = match branch {
        Branch::Coordinated => {
            let row = vbar.transpose() * skew(&Vec3::y());
            let det = -g_alpha * vn * sp_n * gamma.sin();
            ([row[0], row[1], row[2]], y.dot(&inp.dv_a), det)
        }
        _ => {
            let psi23 = psi[(1, 2)];
            if psi23.abs() < 1e-8 {
                return Err(FlatnessError::SingularN { det: 0.0, branch });
            }
            let h1 = (skew(&cache.z_b_fix) * inp.jerk).dot(&z);
            ([k_fix, 0.0, 0.0], h1, g_alpha * k_fix * psi23)
        }
    };
    let n = stack_n(row0, r * e1, r * psi);
    let h2 = inp.jerk - r * jf * r.transpose() * u_dot / m;
    let h = Vector4::new(h1, h2.x, h2.y, h2.z);
    if !(det.abs() > cfg.det_threshold) {
        return Err(FlatnessError::SingularN { det, branch });
    }
    Ok(Core {
        branch,
        r,
        y,
        sign_r,
        thrust,
        alpha,
        gamma,
        airspeed: vn,
        vbar,
        force,
        jf,
        psi,
        df_dalpha,
        k_fix,
        u_dot,
        n,
        h,
        det_closed_form: det,
    })
}

fn low_airspeed_core(inp: &Inputs, cache: &FlatnessCache, cfg: &FlatnessConfig) -> Result<Core, FlatnessError> {
    let sp_n = inp.sp.norm();
    let x = inp.sp / sp_n;
    let (y, k_fix) = fixed_axis_y(&inp.sp, &cache.z_b_fix)?;
    let z = x.cross(&y);
    let r = Mat3::from_columns(&[x, y, z]);
    let thrust = sp_n;
    let e1 = Vec3::x();
    let psi = -thrust * skew(&e1);
    let n = stack_n([k_fix, 0.0, 0.0], r * e1, r * psi);
    let h1 = (skew(&cache.z_b_fix) * inp.jerk).dot(&z);
    let h = Vector4::new(h1, inp.jerk.x, inp.jerk.y, inp.jerk.z);
    let det = -thrust * thrust * k_fix;
    if !(det.abs() > cfg.det_threshold) {
        return Err(FlatnessError::SingularN { det, branch: Branch::LowAirspeed });
    }
    let air = airflow_angles(&(r.transpose() * inp.v_a));
    let alpha = if air.airspeed > 1e-9 { air.alpha } else { cache.alpha_prev };
    let gamma = if inp.v_a.norm() > 0.0 { inp.sp.cross(&inp.v_a).norm().atan2(inp.sp.dot(&inp.v_a)) } else { 0.0 };
    Ok(Core {
        branch: Branch::LowAirspeed,
        r,
        y,
        sign_r: 1.0,
        thrust,
        alpha,
        gamma,
        airspeed: 0.0,
        vbar: Vec3::zeros(),
        force: Vec3::zeros(),
        jf: Mat3::zeros(),
        psi,
        df_dalpha: f64::NAN,
        k_fix,
        u_dot: Vec3::zeros(),
        n,
        h,
        det_closed_form: det,
    })
}

fn solve4(n: &Matrix4<f64>, rhs: &Vector4<f64>) -> Vector4<f64> {
    n.lu().solve(rhs).unwrap_or_else(|| Vector4::from_element(f64::NAN))
}

/// Time derivatives of `N` and `h` along the flat trajectory, given the
/// solved `b = [ȧ_T; ω]`.
pub(crate) fn derivative_blocks(
    c: &Core,
    inp: &Inputs,
    cache: &FlatnessCache,
    b: &Vector4<f64>,
    model: &AeroModel,
) -> (Matrix4<f64>, Vector4<f64>) {
    let m = model.mass;
    let thrust_rate = b[0];
    let omega = Vec3::new(b[1], b[2], b[3]);
    let r = &c.r;
    let rdot = r * skew(&omega);
    let e1 = Vec3::x();
    let e2 = Vec3::y();
    let e3 = Vec3::z();
    let zf = skew(&cache.z_b_fix);

    let fixed_row = |k: f64| {
        let z = r.column(2).into_owned();
        let zdot = rdot * e3;
        let kdot = if k > 0.0 { (cache.z_b_fix.cross(&inp.sp)).dot(&cache.z_b_fix.cross(&inp.jerk)) / k } else { 0.0 };
        let hdot1 = (zf * inp.snap).dot(&z) + (zf * inp.jerk).dot(&zdot);
        ([kdot, 0.0, 0.0], hdot1)
    };

    if c.branch == Branch::LowAirspeed {
        let (row0, hd1) = fixed_row(c.k_fix);
        let blk = -(thrust_rate * r + c.thrust * rdot) * skew(&e1);
        let nd = stack_n(row0, rdot * e1, blk);
        let hd = Vector4::new(hd1, inp.snap.x, inp.snap.y, inp.snap.z);
        return (nd, hd);
    }

    let q = model.half_rho_s();
    let y = c.y;
    let ydot = rdot * e2;
    let u_dot = c.u_dot;
    let u_ddot = match c.branch {
        Branch::Coordinated => inp.ddv_a,
        _ => {
            let (yd, ydd) = fixed_axis_rates(inp, &cache.z_b_fix, &y, c.k_fix);
            in_plane_accel(inp, &y, &yd, &ydd)
        }
    };
    let vbar = c.vbar;
    let vbar_dot = skew(&vbar) * omega + r.transpose() * u_dot;
    let v = c.airspeed;
    let v2 = v * v;
    let alpha_dot = (vbar.x * vbar_dot.z - vbar.z * vbar_dot.x) / v2;
    let v_dot = vbar.dot(&vbar_dot) / v;
    let cv = model.coeff_vector(c.alpha);
    let sk2 = skew(&e2);
    let jf_dot = q
        * (2.0 * alpha_dot * cv.dc_da * vbar.transpose()
            + 2.0 * cv.c * vbar_dot.transpose()
            + alpha_dot * cv.d2c_da2 * (vbar.transpose() * sk2)
            + cv.dc_da * (vbar_dot.transpose() * sk2)
            + v_dot * cv.dc_db * e2.transpose()
            + v * alpha_dot * cv.d2c_dbda * e2.transpose());
    let f_dot = q * (2.0 * v * v_dot * cv.c + v2 * alpha_dot * cv.dc_da);
    let psi_dot = -skew(&(thrust_rate * e1 + f_dot / m)) + (jf_dot * skew(&vbar) + c.jf * skew(&vbar_dot)) / m;
    let blk = rdot * c.psi + r * psi_dot;

    let (row0, hd1) = match c.branch {
        Branch::Coordinated => {
            let row = vbar_dot.transpose() * sk2;
            ([row[0], row[1], row[2]], ydot.dot(&inp.dv_a) + y.dot(&inp.ddv_a))
        }
        _ => fixed_row(c.k_fix),
    };
    let nd = stack_n(row0, rdot * e1, blk);
    let rt_dva = r.transpose() * u_dot;
    let rt_dva_dot = -skew(&omega) * rt_dva + r.transpose() * u_ddot;
    let hd2 = inp.snap - (rdot * c.jf * rt_dva + r * jf_dot * rt_dva + r * c.jf * rt_dva_dot) / m;
    (nd, Vector4::new(hd1, hd2.x, hd2.y, hd2.z))
}

/// Full transform with intermediate blocks. The cache is not modified; the
/// updated cache is returned in the detail.
pub fn transform_detailed(
    t: f64,
    sample: &FlatSample,
    wind: &WindSample,
    cache: &FlatnessCache,
    model: &AeroModel,
    cfg: &FlatnessConfig,
) -> Result<TransformDetail, FlatnessError> {
    let inp = Inputs::new(sample, wind);
    let c = core(&inp, cache, model, cfg)?;
    let b = solve4(&c.n, &c.h);
    let (nd, hd) = derivative_blocks(&c, &inp, cache, &b, model);
    let acc = solve4(&c.n, &(hd - nd * b));
    let omega = Vec3::new(b[1], b[2], b[3]);
    let omega_dot = Vec3::new(acc[1], acc[2], acc[3]);
    let air = airflow_angles(&(c.r.transpose() * inp.v_a));
    let j = model.inertia;
    let torque = j * omega_dot - model.moment(&air) + omega.cross(&(j * omega));
    if c.thrust < 0.0 {
        log::warn!("negative thrust {:.4} at t = {t:.4}", c.thrust);
    }

    let mut cache_out = *cache;
    cache_out.x_b_prev = Some(c.r.column(0).into_owned());
    cache_out.y_b_prev = c.y;
    if c.branch == Branch::Coordinated {
        cache_out.z_b_fix = c.r.column(2).into_owned();
    }
    cache_out.alpha_prev = c.alpha;
    cache_out.branch_prev = Some(c.branch);

    Ok(TransformDetail {
        reference: ReferenceSample {
            t,
            p: sample.p,
            v: sample.v,
            r: c.r,
            thrust: c.thrust,
            omega,
            thrust_rate: b[0],
            thrust_accel: acc[0],
            omega_dot,
            torque,
            alpha: c.alpha,
            gamma: c.gamma,
            branch: c.branch,
            wind: wind.w,
        },
        n: c.n,
        h: c.h,
        n_dot: nd,
        h_dot: hd,
        det_closed_form: c.det_closed_form,
        df_dalpha: c.df_dalpha,
        psi23: c.psi[(1, 2)],
        force: c.force,
        cache_out,
    })
}

/// Transform one flat sample, updating the continuity cache.
pub fn flatness_transform(
    t: f64,
    sample: &FlatSample,
    wind: &WindSample,
    cache: &mut FlatnessCache,
    model: &AeroModel,
    cfg: &FlatnessConfig,
) -> Result<ReferenceSample, FlatnessError> {
    let d = transform_detailed(t, sample, wind, cache, model, cfg)?;
    *cache = d.cache_out;
    Ok(d.reference)
}

/// Sequential transform over a stream of flat samples.
#[derive(Debug, Clone)]
pub struct ReferenceGenerator {
    pub cache: FlatnessCache,
    pub model: AeroModel,
    pub cfg: FlatnessConfig,
}

impl ReferenceGenerator {
    pub fn new(r0: &Mat3, model: AeroModel, cfg: FlatnessConfig) -> Self {
        Self { cache: FlatnessCache::from_attitude(r0), model, cfg }
    }

    pub fn next(&mut self, t: f64, sample: &FlatSample, wind: &WindSample) -> Result<ReferenceSample, FlatnessError> {
        flatness_transform(t, sample, wind, &mut self.cache, &self.model, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_examples() {
        let v = Vec3::new(1.0, 0.0, 0.0);
        assert_eq!(compute_gamma(&v, &Vec3::new(3.0, 0.0, 0.0), 1.0).unwrap(), 0.0);
        assert_relative_eq!(compute_gamma(&v, &Vec3::new(0.0, 0.0, -2.0), 1.0).unwrap(), PI / 2.0);
        assert!(compute_gamma(&Vec3::zeros(), &v, 1.0).is_err());
    }

    #[test]
    fn yb_selection() {
        let va = Vec3::x();
        let sp = Vec3::new(0.0, 0.0, -9.8);
        let (y, r) = select_yb(&va, &sp, &Vec3::y()).unwrap();
        assert_relative_eq!(y, Vec3::y());
        assert_eq!(r, 1.0);
        let (y, r) = select_yb(&va, &sp, &-Vec3::y()).unwrap();
        assert_relative_eq!(y, -Vec3::y());
        assert_eq!(r, -1.0);
        let (_, r) = select_yb(&va, &sp, &Vec3::x()).unwrap();
        assert_eq!(r, 1.0);
        assert!(select_yb(&va, &va, &Vec3::y()).is_none());
    }

    #[test]
    fn alpha_examples() {
        let m = AeroModel::flat_plate();
        assert_relative_eq!(solve_alpha(2.0, PI / 2.0, 0.0, &m).unwrap(), PI / 4.0, epsilon = 1e-12);
        assert!(solve_alpha(0.0, 0.3, 0.1, &m).unwrap().abs() < 1e-10);
    }

    #[test]
    fn hover_is_low_airspeed() {
        let m = AeroModel::flat_plate();
        let r0 = crate::dynamics::hover_attitude(&Vec3::x());
        let mut cache = FlatnessCache::from_attitude(&r0);
        let out = flatness_transform(
            0.0,
            &FlatSample::hover(Vec3::new(0.0, 0.0, -5.0)),
            &WindSample::default(),
            &mut cache,
            &m,
            &FlatnessConfig::default(),
        )
        .unwrap();
        assert_eq!(out.branch, Branch::LowAirspeed);
        assert_relative_eq!(out.thrust, 9.8);
        assert_relative_eq!(out.r.column(0).into_owned(), -Vec3::z());
        assert_eq!(out.omega, Vec3::zeros());
        assert_eq!(out.torque, Vec3::zeros());
        let d = transform_detailed(0.0, &FlatSample::default(), &WindSample::default(), &cache, &m, &Default::default()).unwrap();
        assert_relative_eq!(d.det_closed_form, -941.192, epsilon = 1e-9);
        assert_relative_eq!(d.n.determinant(), -941.192, epsilon = 1e-9);
    }

    #[test]
    fn free_fall_rejected() {
        let m = AeroModel::flat_plate();
        let mut cache = FlatnessCache::from_attitude(&Mat3::identity());
        let s = FlatSample { a: gravity(), ..Default::default() };
        let e = flatness_transform(0.0, &s, &WindSample::default(), &mut cache, &m, &Default::default());
        assert!(matches!(e, Err(FlatnessError::FreeFall(_))));
    }
}
