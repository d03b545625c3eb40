//! Scenario definitions and the closed loop that ties the pieces together:
//! plan, transform to a reference stream, track it with the MPC against the
//! simulated vehicle, then log and score the run.

mod metrics;
mod plan;
mod sim;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aero::{AeroError, AeroModel};
use crate::dynamics::{ConstantWind, DynamicsError, PiecewiseWind, RateActuator, WindField, WindSample};
use crate::flatness::FlatnessError;
use crate::mpc::{MpcConfig, MpcError};
use crate::traj_opt::{BoundaryState, Bounds, PenaltyReport, TrajError, TraverseSpec, Weights};
use crate::Vec3;

pub use metrics::{
    compute_metrics, read_run, report, write_run, ErrorRow, EventRow, MpcRow, RunLog, RunMetrics, StateRow, TimingRow,
};
pub use plan::{
    plan_scenario, read_reference_csv, reference_stream, write_reference_csv, PieceReport, PlanEvent, PlanFile,
    PlannedScenario, ReferenceRow, ReferenceStream,
};
pub use sim::{run_closed_loop, RunOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("planner did not converge on piece {piece} ({status}, |g| = {grad_norm:.3e} after {iterations} iterations): {report:?}")]
    NotConverged { piece: usize, status: String, grad_norm: f64, iterations: usize, report: PenaltyReport },
    #[error("flatness transform failed at t = {t:.4} s: {source}")]
    Flatness { t: f64, source: FlatnessError },
    #[error(transparent)]
    Aero(#[from] AeroError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Constant wind or a piecewise-constant schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WindSpec {
    Constant { vector: Vec3 },
    Piecewise { times: Vec<f64>, values: Vec<Vec3> },
}

impl Default for WindSpec {
    fn default() -> Self {
        WindSpec::Constant { vector: Vec3::zeros() }
    }
}

impl WindSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if let WindSpec::Piecewise { times, values } = self {
            if times.is_empty() || times.len() != values.len() {
                return Err(HarnessError::Config("wind schedule needs matching, non-empty times and values".into()));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(HarnessError::Config("wind schedule times must increase".into()));
            }
        }
        Ok(())
    }
}

impl WindField for WindSpec {
    fn sample(&self, t: f64) -> WindSample {
        match self {
            WindSpec::Constant { vector } => ConstantWind(*vector).sample(t),
            WindSpec::Piecewise { times, values } => {
                PiecewiseWind { times: times.clone(), values: values.clone() }.sample(t)
            }
        }
    }
}

/// What the vehicle is asked to fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Maneuver {
    /// Hold `position`; the vehicle starts displaced by `sim.initial_offset`.
    HoverStep {
        position: Vec3,
        #[serde(default)]
        heading: Option<Vec3>,
        hold: f64,
    },
    /// Rest, transition to a constant-velocity cruise, then back to rest.
    StraightLine {
        start: Vec3,
        direction: Vec3,
        speed: f64,
        cruise_duration: f64,
        /// Distance covered by each transition piece.
        #[serde(default = "default_transition")]
        transition_distance: f64,
    },
    /// Horizontal circle about `center`, entered on the circle at speed.
    Loiter {
        center: Vec3,
        radius: f64,
        speed: f64,
        laps: f64,
        #[serde(default)]
        clockwise: bool,
    },
    /// Rest at `start`, through each window in turn, rest at `end`.
    WindowTraverse {
        start: Vec3,
        windows: Vec<TraverseSpec>,
        end: Vec3,
        /// Optional waypoints per piece, `windows.len() + 1` lists.
        #[serde(default)]
        waypoints: Vec<Vec<Vec3>>,
        #[serde(default)]
        heading: Option<Vec3>,
    },
    /// Pieces between consecutive boundary points, each optimized separately.
    Aerobatic {
        points: Vec<BoundaryState>,
        #[serde(default)]
        waypoints: Vec<Vec<Vec3>>,
        #[serde(default)]
        heading: Option<Vec3>,
    },
}

fn default_transition() -> f64 {
    15.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerSettings {
    pub weights: Weights,
    pub bounds: Bounds,
    pub control_points: usize,
    /// Lower bound on `‖v̇ − g‖`.
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self { weights: Weights::default(), bounds: Bounds::default(), control_points: 2, epsilon: 1.0, max_iterations: 3000 }
    }
}

/// Standard deviations of the state measurement noise fed to the controller.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSettings {
    pub position: f64,
    pub velocity: f64,
    /// Rotation-vector noise, rad.
    pub attitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub dt: f64,
    /// Controller rate, Hz.
    pub control_rate: f64,
    /// Run length; the reference duration when absent.
    pub duration: Option<f64>,
    /// Rest appended after a trajectory that ends at rest.
    pub hold: f64,
    pub actuator: RateActuator,
    /// Added to the reference position to form the initial state.
    pub initial_offset: Vec3,
    pub noise: NoiseSettings,
    /// Abort once `‖p‖` exceeds this, m.
    pub divergence_radius: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            control_rate: 100.0,
            duration: None,
            hold: 0.0,
            actuator: RateActuator::default(),
            initial_offset: Vec3::zeros(),
            noise: NoiseSettings::default(),
            divergence_radius: 1e4,
        }
    }
}

impl SimSettings {
    /// Simulation steps per control period.
    pub fn substeps(&self) -> Result<usize, HarnessError> {
        if !(self.dt > 0.0) || !(self.control_rate > 0.0) {
            return Err(HarnessError::Config("sim dt and control rate must be positive".into()));
        }
        let ratio = 1.0 / (self.dt * self.control_rate);
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * n {
            return Err(HarnessError::Config(format!(
                "control rate {} Hz does not divide the sim rate {} Hz",
                self.control_rate,
                1.0 / self.dt
            )));
        }
        Ok(n as usize)
    }

    pub fn control_period(&self) -> f64 {
        1.0 / self.control_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Free-form remarks, e.g. where illustrative values come from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    /// Aerodynamic model file, relative to the scenario file; flat plate when absent.
    #[serde(default)]
    pub aero_model: Option<PathBuf>,
    #[serde(default)]
    pub wind: WindSpec,
    /// Build the reference and the MPC model with the true wind (`w̄ = w`)
    /// instead of still air.
    #[serde(default = "yes")]
    pub wind_compensation: bool,
    pub maneuver: Maneuver,
    #[serde(default)]
    pub planner: PlannerSettings,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn yes() -> bool {
    true
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut cfg: ScenarioConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_path(&self) -> Option<PathBuf> {
        self.aero_model.as_ref().map(|p| if p.is_absolute() { p.clone() } else { self.base_dir.join(p) })
    }

    pub fn aero(&self) -> Result<AeroModel, HarnessError> {
        match self.model_path() {
            Some(p) => Ok(AeroModel::load(p)?),
            None => Ok(AeroModel::flat_plate()),
        }
    }

    /// Wind assumed by the reference and the MPC.
    pub fn surrogate_wind(&self, t: f64) -> WindSample {
        if self.wind_compensation {
            self.wind.sample(t)
        } else {
            WindSample::default()
        }
    }

    /// Control periods per MPC prediction step.
    pub fn mpc_stride(&self) -> Result<usize, HarnessError> {
        let ratio = self.mpc.dt / self.sim.control_period();
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * n {
            return Err(HarnessError::Config(format!(
                "MPC step {} s is not a multiple of the control period {} s",
                self.mpc.dt,
                self.sim.control_period()
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sim.substeps()?;
        self.mpc_stride()?;
        self.mpc.validate()?;
        self.wind.validate()?;
        if let Some(p) = self.model_path() {
            if !p.is_file() {
                return Err(HarnessError::Config(format!("aero model file {} does not exist", p.display())));
            }
        }
        if let Some(d) = self.sim.duration {
            if !(d >= 0.0) {
                return Err(HarnessError::Config("duration must be non-negative".into()));
            }
        }
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        match &self.maneuver {
            Maneuver::HoverStep { hold, .. } if !(*hold >= 0.0) => return bad("hover hold must be non-negative"),
            Maneuver::StraightLine { direction, speed, cruise_duration, transition_distance, .. } => {
                if direction.norm() < 1e-9 || !(*speed > 0.0) || !(*cruise_duration >= 0.0) || !(*transition_distance > 0.0) {
                    return bad("straight line needs a direction, positive speed and transition distance");
                }
            }
            Maneuver::Loiter { radius, speed, laps, .. } => {
                if !(*radius > 0.0) || !(*speed > 0.0) || !(*laps > 0.0) {
                    return bad("loiter radius, speed and laps must be positive");
                }
            }
            Maneuver::WindowTraverse { windows, waypoints, .. } => {
                if windows.is_empty() {
                    return bad("window traverse needs at least one window");
                }
                if !waypoints.is_empty() && waypoints.len() != windows.len() + 1 {
                    return bad("window traverse waypoints need one list per piece");
                }
                for w in windows {
                    w.validate()?;
                }
            }
            Maneuver::Aerobatic { points, waypoints, .. } => {
                if points.len() < 2 {
                    return bad("aerobatic maneuver needs at least two boundary points");
                }
                if !waypoints.is_empty() && waypoints.len() + 1 != points.len() {
                    return bad("aerobatic waypoints need one list per piece");
                }
            }
            _ => {}
        }
        Ok(())
    }
}
