//! Closed-loop simulation: MPC at the control rate, rate actuator and
//! reduced-model plant at the simulation rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::metrics::{compute_metrics, ErrorRow, EventRow, MpcRow, RunLog, RunMetrics, StateRow, TimingRow};
use super::plan::{quaternion, reference_stream, PlannedScenario, SurrogateField};
use super::{HarnessError, NoiseSettings, ScenarioConfig};
use crate::aero::AeroModel;
use crate::dynamics::{
    reduced_derivative, rk4_step, ControlInput, InputSampling, ModelKind, VehicleState, WindField,
};
use crate::flatness::ReferenceSample;
use crate::mpc::{reference_state, Mpc};
use crate::so3::{exp_so3, log_so3_unchecked};
use crate::{Mat3, Vec3};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub metrics: RunMetrics,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

struct Noise {
    rng: ChaCha8Rng,
    cfg: NoiseSettings,
}

impl Noise {
    fn vec(&mut self, std: f64) -> Vec3 {
        if std > 0.0 {
            let n = Normal::new(0.0, std).expect("finite standard deviation");
            Vec3::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng))
        } else {
            Vec3::zeros()
        }
    }

    fn measure(&mut self, x: &VehicleState) -> VehicleState {
        let (p, v, a) = (self.cfg.position, self.cfg.velocity, self.cfg.attitude);
        VehicleState { p: x.p + self.vec(p), v: x.v + self.vec(v), r: x.r * exp_so3(&self.vec(a)), omega: x.omega }
    }
}

fn state_row(t: f64, x: &VehicleState, thrust: f64, wind: &Vec3, model: &AeroModel) -> StateRow {
    let q = quaternion(&x.r);
    let a = reduced_derivative(x, thrust, &x.omega, wind, model).dv;
    StateRow {
        t,
        px: x.p.x,
        py: x.p.y,
        pz: x.p.z,
        vx: x.v.x,
        vy: x.v.y,
        vz: x.v.z,
        qw: q[0],
        qx: q[1],
        qy: q[2],
        qz: q[3],
        wx: x.omega.x,
        wy: x.omega.y,
        wz: x.omega.z,
        thrust,
        ax: a.x,
        ay: a.y,
        az: a.z,
    }
}

fn attitude_error(r_d: &Mat3, r: &Mat3) -> Vec3 {
    log_so3_unchecked(&(r_d.transpose() * r))
}

fn error_row(s: &ReferenceSample, x: &VehicleState, wind: &Vec3) -> ErrorRow {
    let e = x.p - s.p;
    let ev = x.v - s.v;
    let th = attitude_error(&s.r, &x.r);
    let v_ab = x.r.transpose() * (x.v - wind);
    ErrorRow {
        t: s.t,
        ex: e.x,
        ey: e.y,
        ez: e.z,
        evx: ev.x,
        evy: ev.y,
        evz: ev.z,
        rx: th.x,
        ry: th.y,
        rz: th.z,
        attitude: th.norm(),
        sideslip: v_ab.y,
        branch: s.branch.code(),
    }
}

/// Tracks the planned reference for `sim.duration` (the reference length
/// when unset). The true wind is the scenario wind; the controller and the
/// reference use the surrogate wind. A diverging run stops early and returns
/// what was logged so far.
pub fn run_closed_loop(cfg: &ScenarioConfig, plan: &PlannedScenario) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let model = cfg.aero()?;
    let sim = &cfg.sim;
    let substeps = sim.substeps()?;
    let dt = sim.dt;
    let duration = sim.duration.unwrap_or_else(|| plan.trajectory.duration());
    let stream = reference_stream(plan, &model, &SurrogateField(cfg), sim.control_rate, duration)?;
    let refs = &stream.samples;
    let ticks = refs.len() - 1;
    let mut log = RunLog::default();
    if ticks == 0 {
        return Ok(RunOutcome { metrics: RunMetrics::default(), log, aborted: None });
    }

    let mut mpc = Mpc::new(cfg.mpc.clone(), model.clone())?;
    let mut noise = Noise { rng: ChaCha8Rng::seed_from_u64(cfg.seed), cfg: sim.noise };
    let wind = &cfg.wind;
    let horizon = cfg.mpc.horizon;
    let stride = cfg.mpc_stride()?;
    let mut events = stream.events.iter().peekable();

    let mut x = reference_state(&refs[0]);
    x.p += sim.initial_offset;
    let mut thrust = refs[0].thrust;
    let mut aborted = None;

    'run: for k in 0..ticks {
        let t = refs[k].t;
        log.errors.push(error_row(&refs[k], &x, &wind.at(t)));
        // samples past the end are dropped; the MPC holds the last one
        let window: Vec<ReferenceSample> = (0..horizon).map(|j| k + j * stride).take_while(|i| *i < refs.len()).map(|i| refs[i].clone()).collect();
        let meas = noise.measure(&x);
        let (u, diag) = mpc.control_step(&meas, &window, &cfg.surrogate_wind(t).w)?;
        thrust = u.thrust;
        log.mpc.push(MpcRow {
            t,
            thrust: u.thrust,
            wx: u.omega.x,
            wy: u.omega.y,
            wz: u.omega.z,
            cost: diag.cost,
            kkt_residual: diag.kkt_residual,
            iterations: diag.iterations,
            active_bounds: diag.active_bounds,
            status: format!("{:?}", diag.status),
        });
        log.timing.push(TimingRow { t, solve_time: diag.solve_time });

        for j in 0..substeps {
            let ts = t + j as f64 * dt;
            x.omega = sim.actuator.step(&x.omega, &u.omega, dt);
            log.states.push(state_row(ts, &x, thrust, &wind.at(ts), &model));
            let applied = ControlInput::rates(thrust, x.omega);
            let input = move |_: f64| applied;
            let step = |x: &VehicleState, h: f64| {
                rk4_step(x, ts, h, ModelKind::Reduced, &input, InputSampling::ZeroOrderHold, wind, &model)
            };
            while let Some((e, s)) = events.next_if(|(e, _)| e.t < ts + dt) {
                let xe = if e.t > ts { step(&x, e.t - ts) } else { Ok(x) };
                if let Ok(xe) = xe {
                    log.events.push(EventRow {
                        name: e.name.clone(),
                        t: e.t,
                        position_error: (xe.p - s.p).norm(),
                        attitude_error: attitude_error(&s.r, &xe.r).norm(),
                    });
                }
            }
            match step(&x, dt) {
                Ok(next) if next.p.norm() <= sim.divergence_radius => x = next,
                Ok(next) => {
                    aborted = Some(format!("diverged at t = {:.3} s, |p| = {:.3e} m", ts + dt, next.p.norm()));
                    break 'run;
                }
                Err(e) => {
                    aborted = Some(e.to_string());
                    break 'run;
                }
            }
        }
    }
    if aborted.is_none() {
        let t_end = refs[ticks].t;
        log.states.push(state_row(t_end, &x, thrust, &wind.at(t_end), &model));
        log.errors.push(error_row(&refs[ticks], &x, &wind.at(t_end)));
    } else {
        log::warn!("run aborted: {}", aborted.as_deref().unwrap_or_default());
    }
    let metrics = compute_metrics(&log);
    Ok(RunOutcome { log, metrics, aborted })
}
