mod common;

use common::{cruise_planning_instance, vec_in};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tailsitter::traj_opt::{objective_and_gradient, optimize, optimize_from, BoundaryState, PlanningProblem, Weights};
use tailsitter::{gravity, Vec3};

/// Worst componentwise relative error, with a floor of 1e-3 of the largest
/// component so that near-zero entries compare absolutely.
fn worst_rel(an: &[f64], fd: &[f64]) -> f64 {
    let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    an.iter().zip(fd).map(|(a, f)| (a - f).abs() / a.abs().max(1e-3 * scale)).fold(0.0, f64::max)
}

fn gradient_check(p: &PlanningProblem, free: &[Vec3], times: &[f64]) -> f64 {
    let e = objective_and_gradient(p, free, times).unwrap();
    assert_eq!(e.report.infeasible_nodes + e.report.singular_nodes, 0);
    let h = 1e-6;
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for i in 0..free.len() {
        for c in 0..3 {
            let mut fp = free.to_vec();
            let mut fm = free.to_vec();
            fp[i][c] += h;
            fm[i][c] -= h;
            let jp = objective_and_gradient(p, &fp, times).unwrap().cost;
            let jm = objective_and_gradient(p, &fm, times).unwrap().cost;
            an.push(e.grad_points[i][c]);
            fd.push((jp - jm) / (2.0 * h));
        }
    }
    for i in 0..times.len() {
        let mut tp = times.to_vec();
        let mut tm = times.to_vec();
        tp[i] += h;
        tm[i] -= h;
        let jp = objective_and_gradient(p, free, &tp).unwrap().cost;
        let jm = objective_and_gradient(p, free, &tm).unwrap().cost;
        an.push(e.grad_times[i]);
        fd.push((jp - jm) / (2.0 * h));
    }
    worst_rel(&an, &fd)
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let (p, free, times) = cruise_planning_instance(&mut rng);
        let err = gradient_check(&p, &free, &times);
        assert!(err < 1e-4, "worst relative error {err:.3e}");
    }
}

#[test]
fn gradient_with_active_penalties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut p, free, times) = cruise_planning_instance(&mut rng);
    // tight bounds put every hinge into play
    p.bounds.v_max = 8.2;
    p.bounds.thrust_max = 7.0;
    p.bounds.omega_max = 0.05;
    p.epsilon = 9.9;
    p.weights.snap = 1e-2;
    let err = gradient_check(&p, &free, &times);
    assert!(err < 1e-4, "worst relative error {err:.3e}");
}

#[test]
fn optimizer_converges_on_cruise_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (p, free, times) = cruise_planning_instance(&mut rng);
    let t0 = std::time::Instant::now();
    let r = optimize_from(&p, &free, &times).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(r.converged, "{:?} after {} iterations, |g| = {:.3e}", r.status, r.iterations, r.grad_norm);
    assert!(r.iterations < 3000);
    assert!(elapsed < 10.0, "took {elapsed:.2} s");
    assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(r.grad_norm < 1e-5 * r.cost.abs().max(1.0));
}

fn rest_to_rest() -> PlanningProblem {
    PlanningProblem {
        start: BoundaryState::rest(Vec3::new(0.0, 0.0, -10.0)),
        end: BoundaryState::rest(Vec3::new(10.0, 0.0, -10.0)),
        ..Default::default()
    }
}

#[test]
fn rest_to_rest_respects_bounds() {
    let p = rest_to_rest();
    let r = optimize(&p).unwrap();
    assert!(r.converged, "{:?}", r.status);
    let traj = &r.trajectory;
    let n = (traj.duration() * 1000.0) as usize;
    let mut vmax = 0.0f64;
    let mut smin = f64::INFINITY;
    for k in 0..=n {
        let s = traj.eval(k as f64 * 1e-3);
        vmax = vmax.max(s.v.norm());
        smin = smin.min((s.a - gravity()).norm());
    }
    assert!(vmax <= 1.05 * p.bounds.v_max, "max speed {vmax}");
    assert!(smin >= p.epsilon, "min special acceleration {smin}");
    assert!((traj.end().p - p.end.p).norm() < 1e-9);
}

#[test]
fn heavier_time_penalty_shortens_flight() {
    let p = rest_to_rest();
    let base = optimize(&p).unwrap();
    let fast = PlanningProblem { weights: Weights { time: 10.0 * p.weights.time, ..p.weights }, ..p.clone() };
    let fast = optimize(&fast).unwrap();
    assert!(
        fast.trajectory.duration() < base.trajectory.duration(),
        "{} vs {}",
        fast.trajectory.duration(),
        base.trajectory.duration()
    );
}

#[test]
fn mirrored_problem_gives_mirrored_trajectory() {
    let mirror = |v: Vec3| Vec3::new(v.x, -v.y, v.z);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (p, free, times) = cruise_planning_instance(&mut rng);
    let mut q = p.clone();
    q.waypoints = p.waypoints.iter().map(|w| mirror(*w)).collect();
    let mfree: Vec<Vec3> = free.iter().map(|w| mirror(*w)).collect();
    let a = optimize_from(&p, &free, &times).unwrap();
    let b = optimize_from(&q, &mfree, &times).unwrap();
    let total = a.trajectory.duration();
    assert!((total - b.trajectory.duration()).abs() < 1e-6);
    for k in 0..=100 {
        let t = total * k as f64 / 100.0;
        assert!((mirror(a.trajectory.eval(t).p) - b.trajectory.eval(t).p).norm() < 1e-6);
    }
}

#[test]
fn optimization_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (p, free, times) = cruise_planning_instance(&mut rng);
    let a = optimize_from(&p, &free, &times).unwrap();
    let b = optimize_from(&p, &free, &times).unwrap();
    assert_eq!(a.trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn waypoints_interpolated_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let (p, mut free, times) = cruise_planning_instance(&mut rng);
        for q in free.iter_mut() {
            *q += vec_in(&mut rng, -1.0, 1.0);
        }
        let traj = p.trajectory(&free, &times).unwrap();
        let pts = p.assemble_points(&free);
        let mut t = 0.0;
        for (i, q) in pts.iter().enumerate() {
            t += times[i];
            assert!((traj.eval(t).p - q).norm() < 1e-9);
        }
        let s = traj.start();
        assert!((s.v - p.start.v).norm() < 1e-9 && (s.a - p.start.a).norm() < 1e-9);
    }
}
