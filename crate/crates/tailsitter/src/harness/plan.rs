//! Scenario planning: boundary states, per-piece optimization, concatenation
//! and the sampled reference stream.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{SMatrix, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::{HarnessError, Maneuver, ScenarioConfig};
use crate::aero::AeroModel;
use crate::dynamics::{hover_attitude, ConstantWind, WindField, WindSample};
use crate::flatness::{FlatnessConfig, ReferenceGenerator, ReferenceSample};
use crate::traj_opt::lbfgs::LbfgsConfig;
use crate::traj_opt::{
    optimize, traverse_boundary_state, BoundaryState, FlatTrajectory, Minco, PenaltyReport, PlanningProblem, Segment,
    TrajectoryFile,
};
use crate::{Mat3, Vec3};

/// Loiter interpolation pieces per lap.
const LOITER_PIECES_PER_LAP: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceReport {
    pub converged: bool,
    pub status: String,
    pub iterations: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalties: Option<PenaltyReport>,
}

impl PieceReport {
    fn fixed(duration: f64) -> Self {
        Self { converged: true, status: "fixed".into(), iterations: 0, cost: 0.0, grad_norm: 0.0, duration, penalties: None }
    }
}

/// A named instant of the plan, such as a window traverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEvent {
    pub name: String,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct PlannedScenario {
    pub trajectory: FlatTrajectory,
    /// Attitude that seeds the flatness continuity cache.
    pub initial_attitude: Mat3,
    pub events: Vec<PlanEvent>,
    pub pieces: Vec<PieceReport>,
}

/// Trajectory file with the planning metadata; a bare trajectory file parses too.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    #[serde(flatten)]
    pub trajectory: TrajectoryFile,
    #[serde(default)]
    pub initial_attitude: Option<[[f64; 3]; 3]>,
    #[serde(default)]
    pub events: Vec<PlanEvent>,
    #[serde(default)]
    pub pieces: Vec<PieceReport>,
}

impl PlannedScenario {
    pub fn to_file(&self) -> PlanFile {
        let r = &self.initial_attitude;
        PlanFile {
            trajectory: self.trajectory.to_file(),
            initial_attitude: Some([0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]])),
            events: self.events.clone(),
            pieces: self.pieces.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let f: PlanFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let trajectory: FlatTrajectory = f.trajectory.try_into()?;
        let initial_attitude = match f.initial_attitude {
            Some(rows) => Mat3::from_fn(|i, j| rows[i][j]),
            None => {
                let v = trajectory.start().v;
                let heading = if v.norm() > 1e-9 { v } else { trajectory.end().p - trajectory.start().p };
                hover_attitude(&heading)
            }
        };
        Ok(Self { trajectory, initial_attitude, events: f.events, pieces: f.pieces })
    }
}

fn at_rest(b: &BoundaryState) -> bool {
    b.v.norm() < 1e-9 && b.a.norm() < 1e-9 && b.j.norm() < 1e-9
}

fn heading_or(h: &Option<Vec3>, fallback: Vec3) -> Vec3 {
    h.unwrap_or(fallback)
}

/// Reference attitude at the end of `traj` when the cache starts from `r0`.
fn end_attitude(
    traj: &FlatTrajectory,
    r0: &Mat3,
    model: &AeroModel,
    wind: &dyn WindField,
    t0: f64,
    rate: f64,
) -> Result<Mat3, HarnessError> {
    let mut gen = ReferenceGenerator::new(r0, model.clone(), FlatnessConfig::default());
    let total = traj.duration();
    let n = (total * rate).ceil() as usize;
    let mut r = *r0;
    for k in 0..=n {
        let t = (k as f64 / rate).min(total);
        let s = gen
            .next(t0 + t, &traj.eval(t), &wind.sample(t0 + t))
            .map_err(|source| HarnessError::Flatness { t: t0 + t, source })?;
        r = s.r;
    }
    Ok(r)
}

struct PieceOutput {
    trajectory: FlatTrajectory,
    report: PieceReport,
    end_attitude: Mat3,
}

#[allow(clippy::too_many_arguments)]
fn plan_piece(
    cfg: &ScenarioConfig,
    model: &AeroModel,
    index: usize,
    start: BoundaryState,
    end: BoundaryState,
    waypoints: Vec<Vec3>,
    r_start: Mat3,
    t0: f64,
) -> Result<PieceOutput, HarnessError> {
    let s = &cfg.planner;
    let problem = PlanningProblem {
        start,
        end,
        waypoints,
        control_points: s.control_points,
        weights: s.weights,
        bounds: s.bounds,
        epsilon: s.epsilon,
        wind: cfg.surrogate_wind(t0).w,
        initial_attitude: Some(r_start),
        model: model.clone(),
        solver: LbfgsConfig { max_iterations: s.max_iterations, ..Default::default() },
        ..Default::default()
    };
    let res = optimize(&problem)?;
    if !res.converged {
        return Err(HarnessError::NotConverged {
            piece: index,
            status: format!("{:?}", res.status),
            grad_norm: res.grad_norm,
            iterations: res.iterations,
            report: res.report,
        });
    }
    let duration = res.trajectory.duration();
    log::info!("piece {index}: {} iterations, cost {:.4}, {:.3} s", res.iterations, res.cost, duration);
    // the planner sees one constant wind per piece
    let wind = ConstantWind(problem.wind);
    let end_attitude = end_attitude(&res.trajectory, &r_start, model, &wind, t0, cfg.sim.control_rate)?;
    Ok(PieceOutput {
        report: PieceReport {
            converged: true,
            status: format!("{:?}", res.status),
            iterations: res.iterations,
            cost: res.cost,
            grad_norm: res.grad_norm,
            duration,
            penalties: Some(res.report),
        },
        trajectory: res.trajectory,
        end_attitude,
    })
}

/// Optimizes consecutive pieces between `points` and concatenates them.
/// Returns the trajectory, the reports and each piece's end time.
fn plan_chain(
    cfg: &ScenarioConfig,
    model: &AeroModel,
    points: &[BoundaryState],
    waypoints: &[Vec<Vec3>],
    r0: Mat3,
) -> Result<(FlatTrajectory, Vec<PieceReport>, Vec<f64>), HarnessError> {
    let mut traj = FlatTrajectory { segments: Vec::new() };
    let mut reports = Vec::new();
    let mut ends = Vec::new();
    let mut r = r0;
    for i in 0..points.len() - 1 {
        let wp = waypoints.get(i).cloned().unwrap_or_default();
        let out = plan_piece(cfg, model, i, points[i], points[i + 1], wp, r, traj.duration())?;
        traj.append(&out.trajectory);
        reports.push(out.report);
        ends.push(traj.duration());
        r = out.end_attitude;
    }
    Ok((traj, reports, ends))
}

fn linear_segment(p: Vec3, v: Vec3, duration: f64) -> FlatTrajectory {
    let mut coeffs = SMatrix::<f64, 8, 3>::zeros();
    coeffs.set_row(0, &p.transpose());
    coeffs.set_row(1, &v.transpose());
    FlatTrajectory { segments: vec![Segment { coeffs, duration }] }
}

/// Circle state at angle `th` for angular rate `w`.
fn circle_state(c: Vec3, r: f64, th: f64, w: f64) -> BoundaryState {
    let (s, co) = th.sin_cos();
    let radial = Vec3::new(co, s, 0.0);
    let tangent = Vec3::new(-s, co, 0.0);
    BoundaryState { p: c + r * radial, v: r * w * tangent, a: -r * w * w * radial, j: -r * w * w * w * tangent }
}

fn loiter(center: Vec3, radius: f64, speed: f64, laps: f64, clockwise: bool) -> Result<FlatTrajectory, HarnessError> {
    // NED seen from above: increasing angle turns from north to east
    let w = if clockwise { speed / radius } else { -speed / radius };
    let total = TAU * laps * radius / speed;
    let m = (LOITER_PIECES_PER_LAP * laps).ceil().max(1.0) as usize;
    let h = total / m as f64;
    let points: Vec<Vec3> = (1..m).map(|k| circle_state(center, radius, w * h * k as f64, w).p).collect();
    let start = circle_state(center, radius, 0.0, w);
    let end = circle_state(center, radius, w * total, w);
    Ok(Minco::new(&start, &end, &points, &vec![h; m])?.trajectory())
}

/// Plans the scenario's flat trajectory, appending `sim.hold` seconds of rest
/// when it ends at rest.
pub fn plan_scenario(cfg: &ScenarioConfig) -> Result<PlannedScenario, HarnessError> {
    let model = cfg.aero()?;
    let mut events = Vec::new();
    let (mut trajectory, initial_attitude, pieces) = match &cfg.maneuver {
        Maneuver::HoverStep { position, heading, hold } => {
            let r0 = hover_attitude(&heading_or(heading, Vec3::x()));
            (FlatTrajectory::constant(*position, *hold), r0, vec![PieceReport::fixed(*hold)])
        }
        Maneuver::StraightLine { start, direction, speed, cruise_duration, transition_distance } => {
            let d = direction.normalize();
            let v = *speed * d;
            let p1 = start + *transition_distance * d;
            let p2 = p1 + *cruise_duration * v;
            let p3 = p2 + *transition_distance * d;
            let r0 = hover_attitude(&d);
            let entry = BoundaryState { p: p1, v, ..Default::default() };
            let exit = BoundaryState { p: p2, v, ..Default::default() };
            let a = plan_piece(cfg, &model, 0, BoundaryState::rest(*start), entry, Vec::new(), r0, 0.0)?;
            let mut traj = a.trajectory.clone();
            let t1 = traj.duration();
            let cruise = linear_segment(p1, v, *cruise_duration);
            let wind = SurrogateField(cfg);
            let r1 = end_attitude(&cruise, &a.end_attitude, &model, &wind, t1, cfg.sim.control_rate)?;
            if *cruise_duration > 0.0 {
                traj.append(&cruise);
            }
            let t2 = traj.duration();
            let b = plan_piece(cfg, &model, 1, exit, BoundaryState::rest(p3), Vec::new(), r1, t2)?;
            traj.append(&b.trajectory);
            events.push(PlanEvent { name: "cruise_start".into(), t: t1 });
            events.push(PlanEvent { name: "cruise_end".into(), t: t2 });
            (traj, r0, vec![a.report, PieceReport::fixed(*cruise_duration), b.report])
        }
        Maneuver::Loiter { center, radius, speed, laps, clockwise } => {
            let traj = loiter(*center, *radius, *speed, *laps, *clockwise)?;
            let r0 = hover_attitude(&traj.start().v);
            let d = traj.duration();
            (traj, r0, vec![PieceReport::fixed(d)])
        }
        Maneuver::WindowTraverse { start, windows, end, waypoints, heading } => {
            let mut points = vec![BoundaryState::rest(*start)];
            for (i, w) in windows.iter().enumerate() {
                let b = &cfg.planner.bounds;
                let (state, _, _) =
                    traverse_boundary_state(w, &model, &cfg.surrogate_wind(0.0).w, b.thrust_min, b.thrust_max)?;
                log::debug!("window {i} boundary state {state:?}");
                points.push(state);
            }
            points.push(BoundaryState::rest(*end));
            let first = if windows.is_empty() { *end } else { windows[0].center };
            let r0 = hover_attitude(&heading_or(heading, first - start));
            let (traj, reports, ends) = plan_chain(cfg, &model, &points, waypoints, r0)?;
            for (i, t) in ends.iter().take(windows.len()).enumerate() {
                events.push(PlanEvent { name: format!("window_{i}"), t: *t });
            }
            (traj, r0, reports)
        }
        Maneuver::Aerobatic { points, waypoints, heading } => {
            let fallback = if points[0].v.norm() > 1e-9 { points[0].v } else { points[1].p - points[0].p };
            let r0 = hover_attitude(&heading_or(heading, fallback));
            let (traj, reports, ends) = plan_chain(cfg, &model, points, waypoints, r0)?;
            for (i, t) in ends.iter().take(points.len() - 2).enumerate() {
                events.push(PlanEvent { name: format!("point_{}", i + 1), t: *t });
            }
            (traj, r0, reports)
        }
    };
    if cfg.sim.hold > 0.0 {
        let last = trajectory.end();
        if !at_rest(&last) {
            return Err(HarnessError::Config("a hold needs a trajectory that ends at rest".into()));
        }
        trajectory.append(&FlatTrajectory::constant(last.p, cfg.sim.hold));
    }
    Ok(PlannedScenario { trajectory, initial_attitude, events, pieces })
}

/// The scenario's surrogate wind as a field.
pub(crate) struct SurrogateField<'a>(pub &'a ScenarioConfig);

impl WindField for SurrogateField<'_> {
    fn sample(&self, t: f64) -> WindSample {
        self.0.surrogate_wind(t)
    }
}

/// Reference samples at a fixed rate, with the flat accelerations they came
/// from and the samples at the plan's events.
#[derive(Debug, Clone, Default)]
pub struct ReferenceStream {
    pub samples: Vec<ReferenceSample>,
    pub accel: Vec<Vec3>,
    pub events: Vec<(PlanEvent, ReferenceSample)>,
}

/// Samples `t = k / rate` for `k = 0..=⌊duration·rate⌋` through the flatness
/// transform with one continuity cache.
pub fn reference_stream(
    plan: &PlannedScenario,
    model: &AeroModel,
    wind: &dyn WindField,
    rate: f64,
    duration: f64,
) -> Result<ReferenceStream, HarnessError> {
    let total = plan.trajectory.duration();
    if duration > total + 1e-9 {
        return Err(HarnessError::Config(format!("run of {duration} s exceeds the {total} s reference")));
    }
    let n = (duration * rate + 1e-9).floor() as usize;
    let mut gen = ReferenceGenerator::new(&plan.initial_attitude, model.clone(), FlatnessConfig::default());
    let mut out = ReferenceStream::default();
    let mut pending: Vec<&PlanEvent> = plan.events.iter().filter(|e| e.t <= duration).collect();
    pending.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut pending = pending.into_iter().peekable();
    let transform = |gen: &mut ReferenceGenerator, t: f64| {
        let f = plan.trajectory.eval(t.min(total));
        gen.next(t, &f, &wind.sample(t)).map(|s| (s, f.a)).map_err(|source| HarnessError::Flatness { t, source })
    };
    for k in 0..=n {
        let t = k as f64 / rate;
        let (s, a) = transform(&mut gen, t)?;
        out.samples.push(s);
        out.accel.push(a);
        let next = (k + 1) as f64 / rate;
        while let Some(e) = pending.next_if(|e| e.t < next) {
            let (s, _) = transform(&mut gen.clone(), e.t)?;
            out.events.push((e.clone(), s));
        }
    }
    Ok(out)
}

/// One reference CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub t: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    #[serde(rename = "aT")]
    pub thrust: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub branch: u8,
    pub wind_x: f64,
    pub wind_y: f64,
    pub wind_z: f64,
}

pub(crate) fn quaternion(r: &Mat3) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(r);
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

pub(crate) fn rotation(q: [f64; 4]) -> Mat3 {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner()
}

impl ReferenceRow {
    pub fn new(s: &ReferenceSample, a: &Vec3) -> Self {
        let q = quaternion(&s.r);
        Self {
            t: s.t,
            px: s.p.x,
            py: s.p.y,
            pz: s.p.z,
            vx: s.v.x,
            vy: s.v.y,
            vz: s.v.z,
            ax: a.x,
            ay: a.y,
            az: a.z,
            qw: q[0],
            qx: q[1],
            qy: q[2],
            qz: q[3],
            thrust: s.thrust,
            wx: s.omega.x,
            wy: s.omega.y,
            wz: s.omega.z,
            alpha: s.alpha,
            gamma: s.gamma,
            branch: s.branch.code(),
            wind_x: s.wind.x,
            wind_y: s.wind.y,
            wind_z: s.wind.z,
        }
    }

    pub fn attitude(&self) -> Mat3 {
        rotation([self.qw, self.qx, self.qy, self.qz])
    }
}

pub fn write_reference_csv(path: impl AsRef<Path>, stream: &ReferenceStream) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for (s, a) in stream.samples.iter().zip(&stream.accel) {
        w.serialize(ReferenceRow::new(s, a))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reference_csv(path: impl AsRef<Path>) -> Result<Vec<ReferenceRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
