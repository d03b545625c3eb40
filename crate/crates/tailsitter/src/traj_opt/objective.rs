//! Planning objective: quadrature of the weighted input norm along the
//! trajectory, a time penalty, and smoothed hinge penalties on speed, inputs
//! and the special-acceleration margin. Gradients flow through the flatness
//! input map and the interpolation system.

use nalgebra::{DMatrix, SMatrix, Vector4};
use serde::{Deserialize, Serialize};

use super::lbfgs::{self, LbfgsConfig, LbfgsStatus};
use super::{basis, BoundaryState, FlatTrajectory, Minco, TrajError};
use crate::aero::AeroModel;
use crate::dynamics::{hover_attitude, WindSample};
use crate::flatness::{
    infeasibility_gap, transform_with_gradient, FlatSample, FlatnessCache, FlatnessConfig, FlatnessError,
};
use crate::{gravity, Mat3, Vec3};

const NO_ROOT_WEIGHT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Weights {
    /// Diagonal of `W` for `[a_T, ω_x, ω_y, ω_z]`.
    pub input: [f64; 4],
    /// `ρ`, cost per second of flight.
    pub time: f64,
    pub input_bounds: f64,
    pub velocity: f64,
    pub singularity: f64,
    /// Optional weight of `∫‖p⁽⁴⁾‖²`; off by default. Useful when durations
    /// are optimized per piece, where a piece can shrink to imitate a jerk jump.
    pub snap: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { input: [1.0, 1.0, 1.0, 1.0], time: 20.0, input_bounds: 1e3, velocity: 1e3, singularity: 1e4, snap: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bounds {
    pub v_max: f64,
    pub thrust_min: f64,
    pub thrust_max: f64,
    /// Per-axis body-rate limit, rad/s.
    pub omega_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self { v_max: 12.0, thrust_min: 6.0, thrust_max: 16.0, omega_max: 200f64.to_radians() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanningProblem {
    pub start: BoundaryState,
    pub end: BoundaryState,
    /// Fixed intermediate waypoints, passed in order.
    pub waypoints: Vec<Vec3>,
    /// Free control points inserted in every gap between fixed points.
    pub control_points: usize,
    pub weights: Weights,
    pub bounds: Bounds,
    /// Lower bound on `‖v̇ − g‖`.
    pub epsilon: f64,
    /// Surrogate wind.
    pub wind: Vec3,
    /// Width of the cubic smoothing zone of the hinge penalties.
    pub smoothing: f64,
    /// Quadrature intervals per segment.
    pub quadrature: usize,
    /// Attitude used to seed the flatness cache; hover facing the goal when absent.
    pub initial_attitude: Option<Mat3>,
    /// Seed durations per gap; estimated from distances when absent.
    pub initial_gap_durations: Option<Vec<f64>>,
    pub flatness: FlatnessConfig,
    /// Airspeed band above the low-airspeed threshold over which the planner
    /// blends the two branches; zero keeps the hard switch.
    pub branch_blend: f64,
    #[serde(skip)]
    pub model: AeroModel,
    #[serde(skip)]
    pub solver: LbfgsConfig,
}

impl Default for PlanningProblem {
    fn default() -> Self {
        Self {
            start: BoundaryState::default(),
            end: BoundaryState::default(),
            waypoints: Vec::new(),
            control_points: 3,
            weights: Weights::default(),
            bounds: Bounds::default(),
            epsilon: 1.0,
            wind: Vec3::zeros(),
            smoothing: 0.3,
            quadrature: 16,
            initial_attitude: None,
            initial_gap_durations: None,
            flatness: FlatnessConfig::default(),
            branch_blend: 0.5,
            model: AeroModel::default(),
            solver: LbfgsConfig::default(),
        }
    }
}

/// `(μ − d/2)(d/μ)³` on `(0, μ)`, `d − μ/2` beyond; value and slope.
pub fn smooth_hinge(d: f64, mu: f64) -> (f64, f64) {
    if d <= 0.0 {
        (0.0, 0.0)
    } else if d < mu {
        let r = d / mu;
        ((mu - 0.5 * d) * r * r * r, (3.0 * mu * d * d - 2.0 * d * d * d) / (mu * mu * mu))
    } else {
        (d - 0.5 * mu, 1.0)
    }
}

/// Extremes seen at the quadrature nodes of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub max_speed: f64,
    pub min_special_accel: f64,
    pub min_thrust: f64,
    pub max_thrust: f64,
    pub max_rate: f64,
    /// Nodes where the angle-of-attack equation had no root.
    pub infeasible_nodes: usize,
    /// Nodes skipped for other flatness errors.
    pub singular_nodes: usize,
    pub penalty_cost: f64,
}

impl Default for PenaltyReport {
    fn default() -> Self {
        Self {
            max_speed: 0.0,
            min_special_accel: f64::INFINITY,
            min_thrust: f64::INFINITY,
            max_thrust: f64::NEG_INFINITY,
            max_rate: 0.0,
            infeasible_nodes: 0,
            singular_nodes: 0,
            penalty_cost: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: f64,
    /// Gradient with respect to the free control points.
    pub grad_points: Vec<Vec3>,
    pub grad_times: Vec<f64>,
    pub report: PenaltyReport,
    pub trajectory: FlatTrajectory,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub trajectory: FlatTrajectory,
    pub converged: bool,
    pub status: LbfgsStatus,
    pub iterations: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub report: PenaltyReport,
    pub trace: Vec<f64>,
    pub free_points: Vec<Vec3>,
    pub times: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus_inv(t: f64) -> f64 {
    if t > 30.0 {
        t
    } else {
        t.exp_m1().ln()
    }
}

impl PlanningProblem {
    pub fn gaps(&self) -> usize {
        self.waypoints.len() + 1
    }

    pub fn segments(&self) -> usize {
        self.gaps() * (self.control_points + 1)
    }

    pub fn free_point_count(&self) -> usize {
        self.gaps() * self.control_points
    }

    fn initial_cache(&self) -> FlatnessCache {
        let r0 = self.initial_attitude.unwrap_or_else(|| {
            let heading = if self.start.v.norm() > 1e-6 { self.start.v } else { self.end.p - self.start.p };
            hover_attitude(&heading)
        });
        FlatnessCache::from_attitude(&r0)
    }

    /// Intermediate point sequence with free points interleaved between waypoints.
    pub fn assemble_points(&self, free: &[Vec3]) -> Vec<Vec3> {
        let n = self.control_points;
        let mut out = Vec::with_capacity(self.segments() - 1);
        for g in 0..self.gaps() {
            out.extend_from_slice(&free[g * n..(g + 1) * n]);
            if g < self.waypoints.len() {
                out.push(self.waypoints[g]);
            }
        }
        out
    }

    fn free_indices(&self) -> Vec<usize> {
        let n = self.control_points;
        (0..self.gaps()).flat_map(|g| (0..n).map(move |k| g * (n + 1) + k)).collect()
    }

    /// Straight-line seed: free points evenly spaced, times from gap lengths.
    pub fn seed(&self) -> (Vec<Vec3>, Vec<f64>) {
        let mut fixed = vec![self.start.p];
        fixed.extend_from_slice(&self.waypoints);
        fixed.push(self.end.p);
        let n = self.control_points;
        let v_nom = (0.5 * (self.start.v.norm() + self.end.v.norm())).max(0.3 * self.bounds.v_max).max(0.5);
        let mut free = Vec::new();
        let mut times = Vec::new();
        for g in 0..self.gaps() {
            let (a, b) = (fixed[g], fixed[g + 1]);
            for k in 1..=n {
                free.push(a + (b - a) * (k as f64 / (n + 1) as f64));
            }
            let gap_t = match &self.initial_gap_durations {
                Some(d) if d.len() == self.gaps() => d[g],
                _ => ((b - a).norm() / v_nom).max(1.0),
            };
            times.extend(std::iter::repeat(gap_t / (n + 1) as f64).take(n + 1));
        }
        (free, times)
    }

    pub fn trajectory(&self, free: &[Vec3], times: &[f64]) -> Result<FlatTrajectory, TrajError> {
        Ok(Minco::new(&self.start, &self.end, &self.assemble_points(free), times)?.trajectory())
    }

    /// Solver variables: free points, then one softplus-encoded duration per
    /// gap. The pieces of a gap share its duration equally; free per-piece
    /// durations let a control point slide along the curve at almost no cost,
    /// which leaves the Hessian nearly singular.
    fn pack(&self, free: &[Vec3], times: &[f64]) -> Vec<f64> {
        let k = self.control_points + 1;
        let mut x: Vec<f64> = free.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        x.extend(times.chunks(k).map(|c| softplus_inv(c.iter().sum())));
        x
    }

    fn unpack(&self, x: &[f64]) -> (Vec<Vec3>, Vec<f64>) {
        let np = self.free_point_count();
        let k = self.control_points + 1;
        let free = (0..np).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect();
        let times = x[3 * np..].iter().flat_map(|v| std::iter::repeat(softplus(*v) / k as f64).take(k)).collect();
        (free, times)
    }

    fn evaluate_packed(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (free, times) = self.unpack(x);
        let k = self.control_points + 1;
        match objective_and_gradient(self, &free, &times) {
            Ok(e) => {
                let mut g: Vec<f64> = e.grad_points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                let np = self.free_point_count();
                let gap_grads = e.grad_times.chunks(k).map(|c| c.iter().sum::<f64>() / k as f64);
                g.extend(gap_grads.zip(&x[3 * np..]).map(|(gt, tau)| gt * sigmoid(*tau)));
                (e.cost, g)
            }
            Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
        }
    }
}

/// Input part of the integrand: weighted input norm, input-bound hinges and
/// the no-root penalty.
fn input_cost(
    p: &PlanningProblem,
    s: &FlatSample,
    wind: &WindSample,
    cache: &mut FlatnessCache,
    cfg: &FlatnessConfig,
    report: &mut PenaltyReport,
) -> (f64, SMatrix<f64, 1, 9>) {
    let mu = p.smoothing;
    let w = &p.weights;
    let mut f = 0.0;
    let mut pen = 0.0;
    let mut g = SMatrix::<f64, 1, 9>::zeros();
    match transform_with_gradient(s, wind, cache, &p.model, cfg) {
        Ok(ig) => {
            let u = Vector4::new(ig.thrust, ig.omega.x, ig.omega.y, ig.omega.z);
            let wu = Vector4::from(w.input).component_mul(&u);
            f += u.dot(&wu);
            g += 2.0 * wu.transpose() * ig.d_input;
            let b = &p.bounds;
            let mut hinge = |d: f64, row: usize, sign: f64| {
                let (v, dd) = smooth_hinge(d, mu);
                pen += w.input_bounds * v;
                g += (w.input_bounds * dd * sign) * ig.d_input.row(row);
            };
            hinge(ig.thrust - b.thrust_max, 0, 1.0);
            hinge(b.thrust_min - ig.thrust, 0, -1.0);
            for i in 0..3 {
                hinge(ig.omega[i] - b.omega_max, 1 + i, 1.0);
                hinge(-b.omega_max - ig.omega[i], 1 + i, -1.0);
            }
            report.min_thrust = report.min_thrust.min(ig.thrust);
            report.max_thrust = report.max_thrust.max(ig.thrust);
            report.max_rate = report.max_rate.max(ig.omega.amax());
        }
        Err(FlatnessError::NoRoot { .. }) => {
            report.infeasible_nodes += 1;
            if let Some((gap, dg)) = infeasibility_gap(s, wind, cache, &p.model, cfg) {
                pen += NO_ROOT_WEIGHT * gap;
                g += NO_ROOT_WEIGHT * dg;
            }
        }
        Err(e) => {
            report.singular_nodes += 1;
            log::debug!("node skipped: {e}");
        }
    }
    report.penalty_cost += pen;
    (f + pen, g)
}

/// `3r² − 2r³` on `[0, 1]` and its slope.
fn smoothstep(r: f64) -> (f64, f64) {
    let r = r.clamp(0.0, 1.0);
    (r * r * (3.0 - 2.0 * r), 6.0 * r * (1.0 - r))
}

/// Integrand at one node: value and gradient with respect to `(v, v̇, v̈)`.
fn node_cost(
    p: &PlanningProblem,
    s: &FlatSample,
    wind: &WindSample,
    cache: &mut FlatnessCache,
    report: &mut PenaltyReport,
) -> (f64, SMatrix<f64, 1, 9>) {
    let mu = p.smoothing;
    let w = &p.weights;
    let mut pen = 0.0;
    let mut g = SMatrix::<f64, 1, 9>::zeros();

    let v2 = s.v.norm_squared();
    let (pv, dv) = smooth_hinge(v2 - p.bounds.v_max * p.bounds.v_max, mu);
    pen += w.velocity * pv;
    for i in 0..3 {
        g[i] += w.velocity * dv * 2.0 * s.v[i];
    }
    report.max_speed = report.max_speed.max(v2.sqrt());

    let sp = s.a - gravity();
    let (ps, ds) = smooth_hinge(p.epsilon * p.epsilon - sp.norm_squared(), mu);
    pen += w.singularity * ps;
    for i in 0..3 {
        g[3 + i] -= w.singularity * ds * 2.0 * sp[i];
    }
    report.min_special_accel = report.min_special_accel.min(sp.norm());
    report.penalty_cost += pen;

    // The low-airspeed branch drops the aerodynamic terms, so the inputs jump
    // where it hands over. Above the threshold the two branches are blended
    // over a band of airspeed to keep the cost continuously differentiable.
    let v_a = s.v - wind.w;
    let va = v_a.norm();
    let lo = p.flatness.v_min;
    let band = p.branch_blend;
    let (f_in, g_in) = if band > 0.0 && va >= lo && va < lo + band {
        let mut low_cache = *cache;
        let low_cfg = FlatnessConfig { v_min: f64::INFINITY, ..p.flatness };
        let mut scratch = PenaltyReport::default();
        let (fl, gl) = input_cost(p, s, wind, &mut low_cache, &low_cfg, &mut scratch);
        let (fc, gc) = input_cost(p, s, wind, cache, &p.flatness, report);
        let (b, db) = smoothstep((va - lo) / band);
        let mut g = b * gc + (1.0 - b) * gl;
        let dva = (fc - fl) * db / (band * va) * v_a;
        for i in 0..3 {
            g[i] += dva[i];
        }
        (b * fc + (1.0 - b) * fl, g)
    } else {
        input_cost(p, s, wind, cache, &p.flatness, report)
    };
    (pen + f_in, g + g_in)
}

/// Objective value with gradients with respect to the free control points and
/// the segment durations.
pub fn objective_and_gradient(p: &PlanningProblem, free: &[Vec3], times: &[f64]) -> Result<Evaluation, TrajError> {
    if free.len() != p.free_point_count() || times.len() != p.segments() {
        return Err(TrajError::InvalidInput(format!(
            "expected {} free points and {} durations, got {} and {}",
            p.free_point_count(),
            p.segments(),
            free.len(),
            times.len()
        )));
    }
    let minco = Minco::new(&p.start, &p.end, &p.assemble_points(free), times)?;
    let traj = minco.trajectory();
    let m = times.len();
    let k_max = p.quadrature.max(1);
    let wind = WindSample::from(p.wind);
    let mut cache = p.initial_cache();
    let mut report = PenaltyReport::default();
    let mut cost = 0.0;
    let mut dj_dc = DMatrix::zeros(8 * m, 3);
    let mut dj_dt = vec![p.weights.time; m];
    cost += p.weights.time * times.iter().sum::<f64>();

    for (i, seg) in traj.segments.iter().enumerate() {
        let t_i = seg.duration;
        for k in 0..=k_max {
            let frac = k as f64 / k_max as f64;
            let tau = frac * t_i;
            let edge = if k == 0 || k == k_max { 0.5 } else { 1.0 };
            let w = edge * t_i / k_max as f64;
            let s = seg.eval(tau);
            let (mut f, g) = node_cost(p, &s, &wind, &mut cache, &mut report);
            f += p.weights.snap * s.s.norm_squared();
            let gs = 2.0 * p.weights.snap * s.s;
            cost += w * f;
            let gv = Vec3::new(g[0], g[1], g[2]);
            let ga = Vec3::new(g[3], g[4], g[5]);
            let gj = Vec3::new(g[6], g[7], g[8]);
            let (b1, b2, b3, b4) = (basis(1, tau), basis(2, tau), basis(3, tau), basis(4, tau));
            for j in 0..8 {
                let row = w * (b1[j] * gv + b2[j] * ga + b3[j] * gj + b4[j] * gs);
                for c in 0..3 {
                    dj_dc[(8 * i + j, c)] += row[c];
                }
            }
            let crackle = seg.derivative(5, tau);
            dj_dt[i] += edge / k_max as f64 * f
                + w * frac * (gv.dot(&s.a) + ga.dot(&s.j) + gj.dot(&s.s) + gs.dot(&crackle));
        }
    }

    let (dq, dt_implicit) = minco.backward(&dj_dc);
    for (a, b) in dj_dt.iter_mut().zip(dt_implicit) {
        *a += b;
    }
    let grad_points = p.free_indices().iter().map(|i| dq[*i]).collect();
    Ok(Evaluation { cost, grad_points, grad_times: dj_dt, report, trajectory: traj })
}

/// Minimizes the objective over free points and softplus-encoded durations,
/// starting from the straight-line seed.
pub fn optimize(p: &PlanningProblem) -> Result<PlanResult, TrajError> {
    let (free, times) = p.seed();
    optimize_from(p, &free, &times)
}

pub fn optimize_from(p: &PlanningProblem, free: &[Vec3], times: &[f64]) -> Result<PlanResult, TrajError> {
    // fail early on an unusable seed
    objective_and_gradient(p, free, times)?;
    let x0 = p.pack(free, times);
    let res = lbfgs::minimize(|x| p.evaluate_packed(x), &x0, &p.solver);
    let (free, times) = p.unpack(&res.x);
    let e = objective_and_gradient(p, &free, &times)?;
    if !res.converged() {
        log::warn!(
            "planner stopped with {:?} after {} iterations, |g| = {:.3e}, J = {:.6e}",
            res.status,
            res.iterations,
            res.grad_norm,
            res.f
        );
    }
    Ok(PlanResult {
        trajectory: e.trajectory,
        converged: res.converged(),
        status: res.status,
        iterations: res.iterations,
        cost: res.f,
        grad_norm: res.grad_norm,
        report: e.report,
        trace: res.trace,
        free_points: free,
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_is_c1_and_matches_pieces() {
        let mu = 0.3;
        assert_eq!(smooth_hinge(-1.0, mu), (0.0, 0.0));
        let (v, d) = smooth_hinge(mu, mu);
        assert!((v - mu / 2.0).abs() < 1e-15 && (d - 1.0).abs() < 1e-15);
        for x in [0.05, 0.15, 0.29, 0.5] {
            let h = 1e-7;
            let fd = (smooth_hinge(x + h, mu).0 - smooth_hinge(x - h, mu).0) / (2.0 * h);
            assert!((fd - smooth_hinge(x, mu).1).abs() < 1e-7);
        }
    }

    #[test]
    fn time_only_objective() {
        let p = PlanningProblem {
            start: BoundaryState::rest(Vec3::zeros()),
            end: BoundaryState::rest(Vec3::new(0.0, 0.0, 0.0)),
            control_points: 0,
            weights: Weights { input: [0.0; 4], time: 1.0, input_bounds: 0.0, velocity: 0.0, singularity: 0.0, snap: 0.0 },
            ..Default::default()
        };
        let e = objective_and_gradient(&p, &[], &[2.5]).unwrap();
        assert_eq!(e.cost, 2.5);
        assert_eq!(e.grad_times, vec![1.0]);
    }

    #[test]
    fn hover_problem_cost() {
        let p = PlanningProblem {
            start: BoundaryState::rest(Vec3::new(0.0, 0.0, -5.0)),
            end: BoundaryState::rest(Vec3::new(0.0, 0.0, -5.0)),
            control_points: 0,
            ..Default::default()
        };
        let e = objective_and_gradient(&p, &[], &[2.0]).unwrap();
        let expect = p.weights.time * 2.0 + 2.0 * 9.8 * 9.8;
        assert!((e.cost - expect).abs() < 1e-9 * expect);
        let p3 = PlanningProblem { control_points: 1, ..p };
        let e = objective_and_gradient(&p3, &[Vec3::new(0.0, 0.0, -5.0)], &[1.0, 1.0]).unwrap();
        // lateral moves are second order; the vertical slope is quadrature error only
        let g = e.grad_points[0];
        assert!(g.x.abs() < 1e-9 && g.y.abs() < 1e-9);
        let h = 1e-6;
        let at = |z: f64| objective_and_gradient(&p3, &[Vec3::new(0.0, 0.0, z)], &[1.0, 1.0]).unwrap().cost;
        let fd = (at(-5.0 + h) - at(-5.0 - h)) / (2.0 * h);
        assert!((fd - g.z).abs() < 1e-5, "{fd} vs {}", g.z);
    }
}
