//! Run logs, their CSV form and the metrics computed from them.

use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Vehicle state at one simulation step, with the applied thrust and the
/// resulting acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateRow {
    pub t: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    #[serde(rename = "aT")]
    pub thrust: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

/// Tracking error at one control tick: `p − p_d`, `v − v_d`, the rotation
/// vector of `R_dᵀR`, its angle, and the lateral body air velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorRow {
    pub t: f64,
    pub ex: f64,
    pub ey: f64,
    pub ez: f64,
    pub evx: f64,
    pub evy: f64,
    pub evz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub attitude: f64,
    pub sideslip: f64,
    pub branch: u8,
}

/// Command and QP outcome at one control tick.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MpcRow {
    pub t: f64,
    #[serde(rename = "aT")]
    pub thrust: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub active_bounds: usize,
    pub status: String,
}

/// Wall-clock solve time, kept apart so the other logs stay reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingRow {
    pub t: f64,
    pub solve_time: f64,
}

/// Tracking error at a plan event, e.g. a window traverse.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventRow {
    pub name: String,
    pub t: f64,
    pub position_error: f64,
    pub attitude_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub states: Vec<StateRow>,
    pub errors: Vec<ErrorRow>,
    pub mpc: Vec<MpcRow>,
    pub timing: Vec<TimingRow>,
    pub events: Vec<EventRow>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Control ticks with a tracking error sample.
    pub samples: usize,
    pub duration: f64,
    pub rms_position: f64,
    pub max_position: f64,
    /// Angle of `Log(R_dᵀR)`, rad.
    pub rms_attitude: f64,
    pub max_attitude: f64,
    /// Lateral body air velocity, m/s.
    pub rms_sideslip: f64,
    pub max_sideslip: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub max_rate: f64,
    pub min_thrust_cmd: f64,
    pub max_thrust_cmd: f64,
    /// Largest commanded body rate on any axis, rad/s.
    pub max_rate_cmd: f64,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    pub qp_failures: usize,
    pub branch_switches: usize,
    pub events: Vec<EventRow>,
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn max(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, f64::max)
}

/// RMS and max of `|v|`; the RMS is capped at the max against rounding.
fn rms_max<I: Iterator<Item = f64> + Clone>(values: I) -> (f64, f64) {
    let m = max(values.clone().map(f64::abs));
    (rms(values).min(m), m)
}

fn norm3(x: f64, y: f64, z: f64) -> f64 {
    (x * x + y * y + z * z).sqrt()
}

pub fn compute_metrics(log: &RunLog) -> RunMetrics {
    let e = &log.errors;
    let pos = || e.iter().map(|r| norm3(r.ex, r.ey, r.ez));
    let s = &log.states;
    let solve = || log.timing.iter().map(|r| r.solve_time);
    let first = |f: fn(&MpcRow) -> f64| log.mpc.first().map(f).unwrap_or(0.0);
    let (rms_position, max_position) = rms_max(pos());
    let (rms_attitude, max_attitude) = rms_max(e.iter().map(|r| r.attitude));
    let (rms_sideslip, max_sideslip) = rms_max(e.iter().map(|r| r.sideslip));
    RunMetrics {
        samples: e.len(),
        duration: match (s.first(), s.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        },
        rms_position,
        max_position,
        rms_attitude,
        max_attitude,
        rms_sideslip,
        max_sideslip,
        max_speed: max(s.iter().map(|r| norm3(r.vx, r.vy, r.vz))),
        max_accel: max(s.iter().map(|r| norm3(r.ax, r.ay, r.az))),
        max_rate: max(s.iter().map(|r| norm3(r.wx, r.wy, r.wz))),
        min_thrust_cmd: log.mpc.iter().map(|r| r.thrust).fold(first(|r| r.thrust), f64::min),
        max_thrust_cmd: log.mpc.iter().map(|r| r.thrust).fold(first(|r| r.thrust), f64::max),
        max_rate_cmd: max(log.mpc.iter().map(|r| r.wx.abs().max(r.wy.abs()).max(r.wz.abs()))),
        mean_solve_time: if log.timing.is_empty() { 0.0 } else { solve().sum::<f64>() / log.timing.len() as f64 },
        max_solve_time: max(solve()),
        qp_failures: log.mpc.iter().filter(|r| r.status != "Solved").count(),
        branch_switches: e.windows(2).filter(|w| w[0].branch != w[1].branch).count(),
        events: log.events.clone(),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_reader(File::open(path)?);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Writes `log.csv`, `errors.csv`, `mpc.csv`, `timing.csv`, `events.csv` and
/// `metrics.json` into `dir`.
pub fn write_run(dir: impl AsRef<Path>, log: &RunLog, metrics: &RunMetrics) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("log.csv"), &log.states)?;
    write_csv(&dir.join("errors.csv"), &log.errors)?;
    write_csv(&dir.join("mpc.csv"), &log.mpc)?;
    write_csv(&dir.join("timing.csv"), &log.timing)?;
    write_csv(&dir.join("events.csv"), &log.events)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}

/// Reads a run directory; missing files count as empty logs.
pub fn read_run(dir: impl AsRef<Path>) -> Result<RunLog, HarnessError> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(HarnessError::Config(format!("{} is not a run directory", dir.display())));
    }
    Ok(RunLog {
        states: read_csv(&dir.join("log.csv"))?,
        errors: read_csv(&dir.join("errors.csv"))?,
        mpc: read_csv(&dir.join("mpc.csv"))?,
        timing: read_csv(&dir.join("timing.csv"))?,
        events: read_csv(&dir.join("events.csv"))?,
    })
}

#[derive(Serialize)]
struct AxisErrorRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    roll: f64,
    pitch: f64,
    yaw: f64,
}

/// Recomputes the metrics of a run directory, writes them to `out` as JSON
/// and the per-axis errors beside it as `<stem>_errors.csv`.
pub fn report(run_dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<RunMetrics, HarnessError> {
    let log = read_run(run_dir)?;
    let metrics = compute_metrics(&log);
    let out = out.as_ref();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&metrics)?)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let axes: Vec<AxisErrorRow> = log
        .errors
        .iter()
        .map(|r| AxisErrorRow { t: r.t, x: r.ex, y: r.ey, z: r.ez, roll: r.rx, pitch: r.ry, yaw: r.rz })
        .collect();
    write_csv(&out.with_file_name(format!("{stem}_errors.csv")), &axes)?;
    Ok(metrics)
}
