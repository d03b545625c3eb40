//! Full and reduced vehicle models, RK4 integration, wind fields and the
//! body-rate actuator used in closed-loop simulation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aero::{airflow_angles, AeroModel, ForceMode};
use crate::so3::{orthonormalize, skew};
use crate::{gravity, Mat3, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite state at t = {t:.6} s")]
    NonFinite { t: f64 },
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub p: Vec3,
    pub v: Vec3,
    pub r: Mat3,
    pub omega: Vec3,
}

impl VehicleState {
    pub fn new(p: Vec3, v: Vec3, r: Mat3, omega: Vec3) -> Self {
        Self { p, v, r, omega }
    }

    /// At rest with body x up and body z along `heading` (horizontal).
    pub fn hover(p: Vec3, heading: &Vec3) -> Self {
        Self { p, v: Vec3::zeros(), r: hover_attitude(heading), omega: Vec3::zeros() }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.r.iter()).chain(self.omega.iter()).all(|v| v.is_finite())
    }
}

/// Hover attitude: `x_b = −e3`, `z_b` along the horizontal projection of `heading`.
pub fn hover_attitude(heading: &Vec3) -> Mat3 {
    let mut z = Vec3::new(heading.x, heading.y, 0.0);
    if z.norm() < 1e-9 {
        z = Vec3::x();
    }
    z.normalize_mut();
    let x = -Vec3::z();
    let y = z.cross(&x);
    Mat3::from_columns(&[x, y, z])
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    /// Thrust acceleration along body x, m/s².
    pub thrust: f64,
    /// Body-rate command (reduced model input), rad/s.
    pub omega: Vec3,
    /// Body torque (full model input), N·m.
    pub torque: Vec3,
}

impl ControlInput {
    pub fn rates(thrust: f64, omega: Vec3) -> Self {
        Self { thrust, omega, torque: Vec3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub dp: Vec3,
    pub dv: Vec3,
    pub dr: Mat3,
    pub domega: Vec3,
}

fn translational(x: &VehicleState, thrust: f64, wind: &Vec3, model: &AeroModel, mode: ForceMode) -> Vec3 {
    let f = model.force(&x.r, &(x.v - wind), mode);
    gravity() + thrust * x.r.column(0) + x.r * f / model.mass
}

pub fn full_derivative(x: &VehicleState, u: &ControlInput, wind: &Vec3, model: &AeroModel) -> StateDerivative {
    let air = airflow_angles(&(x.r.transpose() * (x.v - wind)));
    let j = model.inertia;
    let rhs = u.torque + model.moment(&air) - x.omega.cross(&(j * x.omega));
    StateDerivative {
        dp: x.v,
        dv: translational(x, u.thrust, wind, model, ForceMode::Full),
        dr: x.r * skew(&x.omega),
        domega: j.lu().solve(&rhs).expect("inertia is invertible"),
    }
}

/// Reduced model: body rate is an input, so `x.omega` is ignored.
pub fn reduced_derivative(x: &VehicleState, thrust: f64, omega: &Vec3, wind: &Vec3, model: &AeroModel) -> StateDerivative {
    StateDerivative {
        dp: x.v,
        dv: translational(x, thrust, wind, model, ForceMode::Full),
        dr: x.r * skew(omega),
        domega: Vec3::zeros(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    Full,
    #[default]
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputSampling {
    #[default]
    ZeroOrderHold,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindSample {
    pub w: Vec3,
    pub dw: Vec3,
    pub ddw: Vec3,
}

impl From<Vec3> for WindSample {
    fn from(w: Vec3) -> Self {
        Self { w, ..Default::default() }
    }
}

pub trait WindField {
    fn sample(&self, t: f64) -> WindSample;

    fn at(&self, t: f64) -> Vec3 {
        self.sample(t).w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConstantWind(pub Vec3);

impl WindField for ConstantWind {
    fn sample(&self, _t: f64) -> WindSample {
        self.0.into()
    }
}

/// Wind held at `values[i]` from `times[i]` until the next breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseWind {
    pub times: Vec<f64>,
    pub values: Vec<Vec3>,
}

impl WindField for PiecewiseWind {
    fn sample(&self, t: f64) -> WindSample {
        let i = self.times.iter().rposition(|s| *s <= t).unwrap_or(0);
        self.values.get(i).copied().unwrap_or_default().into()
    }
}

/// `mean + amplitude·sin(2π f t + phase)`, componentwise amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidalWind {
    pub mean: Vec3,
    pub amplitude: Vec3,
    pub frequency: f64,
    pub phase: f64,
}

impl WindField for SinusoidalWind {
    fn sample(&self, t: f64) -> WindSample {
        let w = 2.0 * std::f64::consts::PI * self.frequency;
        let (s, c) = (w * t + self.phase).sin_cos();
        WindSample {
            w: self.mean + self.amplitude * s,
            dw: self.amplitude * (w * c),
            ddw: self.amplitude * (-w * w * s),
        }
    }
}

impl<W: WindField + ?Sized> WindField for Box<W> {
    fn sample(&self, t: f64) -> WindSample {
        (**self).sample(t)
    }
}

fn derivative(kind: ModelKind, x: &VehicleState, u: &ControlInput, wind: &Vec3, model: &AeroModel) -> StateDerivative {
    match kind {
        ModelKind::Full => full_derivative(x, u, wind, model),
        ModelKind::Reduced => reduced_derivative(x, u.thrust, &u.omega, wind, model),
    }
}

fn advance(x: &VehicleState, k: &StateDerivative, h: f64) -> VehicleState {
    VehicleState { p: x.p + h * k.dp, v: x.v + h * k.dv, r: x.r + h * k.dr, omega: x.omega + h * k.domega }
}

/// One classical RK4 step followed by polar re-orthonormalization.
#[allow(clippy::too_many_arguments)]
pub fn rk4_step(
    x: &VehicleState,
    t: f64,
    dt: f64,
    kind: ModelKind,
    input: &dyn Fn(f64) -> ControlInput,
    sampling: InputSampling,
    wind: &dyn WindField,
    model: &AeroModel,
) -> Result<VehicleState, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::BadStep(dt));
    }
    let u_at = |s: f64| match sampling {
        InputSampling::ZeroOrderHold => input(t),
        InputSampling::Continuous => input(s),
    };
    let (u0, um, u1) = (u_at(t), u_at(t + 0.5 * dt), u_at(t + dt));
    let (w0, wm, w1) = (wind.at(t), wind.at(t + 0.5 * dt), wind.at(t + dt));
    let k1 = derivative(kind, x, &u0, &w0, model);
    let k2 = derivative(kind, &advance(x, &k1, 0.5 * dt), &um, &wm, model);
    let k3 = derivative(kind, &advance(x, &k2, 0.5 * dt), &um, &wm, model);
    let k4 = derivative(kind, &advance(x, &k3, dt), &u1, &w1, model);
    let s = dt / 6.0;
    let mut out = VehicleState {
        p: x.p + s * (k1.dp + 2.0 * k2.dp + 2.0 * k3.dp + k4.dp),
        v: x.v + s * (k1.dv + 2.0 * k2.dv + 2.0 * k3.dv + k4.dv),
        r: x.r + s * (k1.dr + 2.0 * k2.dr + 2.0 * k3.dr + k4.dr),
        omega: x.omega + s * (k1.domega + 2.0 * k2.domega + 2.0 * k3.domega + k4.domega),
    };
    if kind == ModelKind::Reduced {
        out.omega = u1.omega;
    }
    if !out.is_finite() {
        return Err(DynamicsError::NonFinite { t: t + dt });
    }
    out.r = orthonormalize(&out.r);
    Ok(out)
}

/// Integrates `steps` RK4 steps from `t0`; the returned trajectory includes `x0`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_rk4(
    x0: &VehicleState,
    t0: f64,
    dt: f64,
    steps: usize,
    kind: ModelKind,
    input: &dyn Fn(f64) -> ControlInput,
    sampling: InputSampling,
    wind: &dyn WindField,
    model: &AeroModel,
) -> Result<Vec<VehicleState>, DynamicsError> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(*x0);
    let mut x = *x0;
    for i in 0..steps {
        x = rk4_step(&x, t0 + i as f64 * dt, dt, kind, input, sampling, wind, model)?;
        out.push(x);
    }
    Ok(out)
}

/// First-order lag from commanded to achieved body rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateActuator {
    pub time_constant: f64,
    /// Per-axis limit on |dω/dt|, rad/s².
    #[serde(default)]
    pub max_rate_change: Option<f64>,
}

impl Default for RateActuator {
    fn default() -> Self {
        Self { time_constant: 0.03, max_rate_change: None }
    }
}

impl RateActuator {
    pub fn step(&self, omega: &Vec3, cmd: &Vec3, dt: f64) -> Vec3 {
        let gain = (dt / self.time_constant).min(1.0);
        let mut delta = gain * (cmd - omega);
        if let Some(lim) = self.max_rate_change {
            let m = lim * dt;
            delta = delta.map(|d| d.clamp(-m, m));
        }
        omega + delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hover_state() -> VehicleState {
        VehicleState::hover(Vec3::new(1.0, 2.0, -3.0), &Vec3::x())
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let m = AeroModel::flat_plate();
        let x = hover_state();
        assert_relative_eq!(x.r.column(0).into_owned(), -Vec3::z());
        let d = full_derivative(&x, &ControlInput::rates(9.8, Vec3::zeros()), &Vec3::zeros(), &m);
        assert_eq!(d.dp, Vec3::zeros());
        assert!(d.dv.norm() < 1e-15);
        let d = reduced_derivative(&x, 9.8, &Vec3::zeros(), &Vec3::zeros(), &m);
        assert!(d.dv.norm() < 1e-15);
    }

    #[test]
    fn free_fall() {
        let m = AeroModel::flat_plate();
        let x = hover_state();
        let d = full_derivative(&x, &ControlInput::default(), &Vec3::zeros(), &m);
        assert_eq!(d.dv, gravity());
        let d = reduced_derivative(&x, 0.0, &Vec3::zeros(), &Vec3::zeros(), &m);
        assert_eq!(d.dv, gravity());
    }

    #[test]
    fn actuator_step_response() {
        let act = RateActuator::default();
        let mut w = Vec3::zeros();
        let cmd = Vec3::new(1.0, 0.0, 0.0);
        for _ in 0..30 {
            w = act.step(&w, &cmd, 1e-3);
        }
        let exact = 1.0 - (-1.0f64).exp();
        assert!((w.x - exact).abs() < 0.01 * exact);
        assert_eq!(act.step(&cmd, &cmd, 1e-3), cmd);

        let act = RateActuator { time_constant: 0.03, max_rate_change: Some(50.0) };
        let w = act.step(&Vec3::zeros(), &Vec3::new(10.0, -10.0, 0.001), 1e-3);
        assert_relative_eq!(w, Vec3::new(0.05, -0.05, 0.001 / 30.0), epsilon = 1e-15);
    }

    #[test]
    fn piecewise_wind_holds_values() {
        let w = PiecewiseWind { times: vec![0.0, 1.0], values: vec![Vec3::x(), Vec3::y()] };
        assert_eq!(w.at(0.5), Vec3::x());
        assert_eq!(w.at(1.0), Vec3::y());
        assert_eq!(w.at(5.0), Vec3::y());
    }

    #[test]
    fn sinusoidal_wind_derivatives_match_differences() {
        let w = SinusoidalWind { mean: Vec3::x(), amplitude: Vec3::new(1.0, 2.0, 0.5), frequency: 0.7, phase: 0.3 };
        let h = 1e-5;
        let t = 0.42;
        let fd = (w.at(t + h) - w.at(t - h)) / (2.0 * h);
        assert_relative_eq!(fd, w.sample(t).dw, epsilon = 1e-8);
        let fd2 = (w.sample(t + h).dw - w.sample(t - h).dw) / (2.0 * h);
        assert_relative_eq!(fd2, w.sample(t).ddw, epsilon = 1e-7);
    }
}
