use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use tailsitter::aero::AeroModel;
use tailsitter::dynamics::ConstantWind;
use tailsitter::harness::{
    plan_scenario, reference_stream, report, run_closed_loop, write_reference_csv, write_run, HarnessError,
    PlannedScenario, ScenarioConfig, WindSpec,
};

#[derive(Parser)]
#[command(name = "tailsitter", version, about = "Plan, transform, simulate and score tail-sitter flights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// Constant wind `x,y,z` in m/s (NED), replacing the scenario wind.
    #[arg(long, global = true, value_parser = parse_vec3, allow_hyphen_values = true)]
    wind: Option<Vector3<f64>>,
    /// Seed for the measurement noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// MPC horizon length in steps.
    #[arg(long, global = true)]
    mpc_horizon: Option<usize>,
    /// Plan and track as if the air were still (surrogate wind zero).
    #[arg(long, global = true)]
    no_wind_compensation: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the scenario trajectory and write it as JSON.
    Plan {
        scenario: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Sample the flatness transform of a trajectory into a reference CSV.
    Transform {
        trajectory: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Aerodynamic model file; flat plate when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Sample rate, Hz.
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
    },
    /// Run the closed loop and write the logs into a directory.
    Simulate {
        scenario: PathBuf,
        /// Previously planned trajectory; the scenario is planned when absent.
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Recompute the metrics of a run directory.
    Report {
        run: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got {s:?}")),
    }
}

fn load_scenario(path: &PathBuf, o: &Overrides) -> Result<ScenarioConfig, HarnessError> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(w) = o.wind {
        cfg.wind = WindSpec::Constant { vector: w };
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(n) = o.mpc_horizon {
        cfg.mpc.horizon = n;
    }
    if o.no_wind_compensation {
        cfg.wind_compensation = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let o = &cli.overrides;
    match cli.command {
        Command::Plan { scenario, output } => {
            let cfg = load_scenario(&scenario, o)?;
            let plan = plan_scenario(&cfg)?;
            plan.save(&output)?;
            println!("{}: {:.3} s over {} segments -> {}", cfg.name, plan.trajectory.duration(), plan.trajectory.segments.len(), output.display());
        }
        Command::Transform { trajectory, output, model, rate } => {
            let plan = PlannedScenario::load(&trajectory)?;
            let model = match model {
                Some(p) => AeroModel::load(p)?,
                None => AeroModel::flat_plate(),
            };
            let w = if o.no_wind_compensation { Vector3::zeros() } else { o.wind.unwrap_or_else(Vector3::zeros) };
            let stream = reference_stream(&plan, &model, &ConstantWind(w), rate, plan.trajectory.duration())?;
            write_reference_csv(&output, &stream)?;
            println!("{} samples -> {}", stream.samples.len(), output.display());
        }
        Command::Simulate { scenario, traj, output } => {
            let cfg = load_scenario(&scenario, o)?;
            let plan = match traj {
                Some(p) => PlannedScenario::load(p)?,
                None => plan_scenario(&cfg)?,
            };
            let out = run_closed_loop(&cfg, &plan)?;
            write_run(&output, &out.log, &out.metrics)?;
            let m = &out.metrics;
            println!(
                "{}: position RMS {:.4} m (max {:.4}), attitude RMS {:.3} deg, mean solve {:.3} ms -> {}",
                cfg.name,
                m.rms_position,
                m.max_position,
                m.rms_attitude.to_degrees(),
                m.mean_solve_time * 1e3,
                output.display()
            );
            for e in &m.events {
                println!("  {} at {:.3} s: {:.4} m, {:.3} deg", e.name, e.t, e.position_error, e.attitude_error.to_degrees());
            }
            if let Some(reason) = out.aborted {
                return Err(HarnessError::Config(format!("simulation aborted: {reason}")));
            }
        }
        Command::Report { run, output } => {
            let m = report(&run, &output)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::NotConverged { .. } => ExitCode::from(2),
                HarnessError::Flatness { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
