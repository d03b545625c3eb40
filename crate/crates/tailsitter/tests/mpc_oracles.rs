mod common;

use common::{cambered_table, random_reference, rel_err, vec_in};
use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tailsitter::aero::AeroModel;
use tailsitter::dynamics::{hover_attitude, reduced_derivative, VehicleState};
use tailsitter::flatness::{Branch, ReferenceSample};
use tailsitter::mpc::*;
use tailsitter::so3::{exp_so3, orthonormalize, skew};
use tailsitter::Vec3;

fn models() -> [AeroModel; 2] {
    [AeroModel::flat_plate(), cambered_table()]
}

fn hover(p: Vec3) -> ReferenceSample {
    ReferenceSample {
        t: 0.0,
        p,
        v: Vec3::zeros(),
        r: hover_attitude(&Vec3::x()),
        thrust: 9.8,
        omega: Vec3::zeros(),
        thrust_rate: 0.0,
        thrust_accel: 0.0,
        omega_dot: Vec3::zeros(),
        torque: Vec3::zeros(),
        alpha: 0.0,
        gamma: 0.0,
        branch: Branch::LowAirspeed,
        wind: Vec3::zeros(),
    }
}

/// Central-difference Jacobians of the error dynamics at `δx = 0, δu = 0`.
fn fd_jacobians(s: &ReferenceSample, model: &AeroModel) -> (Mat9, Mat94, Mat93) {
    let h = 1e-6;
    let w = s.wind;
    let f = |dx: &Vec9, du: &Vector4<f64>, wind: &Vec3| error_dynamics(dx, du, s, wind, &w, model);
    let mut fx = Mat9::zeros();
    for i in 0..9 {
        let mut e = Vec9::zeros();
        e[i] = h;
        fx.set_column(i, &((f(&e, &Vector4::zeros(), &w) - f(&-e, &Vector4::zeros(), &w)) / (2.0 * h)));
    }
    let mut fu = Mat94::zeros();
    for i in 0..4 {
        let mut e = Vector4::zeros();
        e[i] = h;
        fu.set_column(i, &((f(&Vec9::zeros(), &e, &w) - f(&Vec9::zeros(), &-e, &w)) / (2.0 * h)));
    }
    let mut fw = Mat93::zeros();
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = h;
        fw.set_column(i, &((f(&Vec9::zeros(), &Vector4::zeros(), &(w + e)) - f(&Vec9::zeros(), &Vector4::zeros(), &(w - e))) / (2.0 * h)));
    }
    (fx, fu, fw)
}

#[test]
fn linearization_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst: f64 = 0.0;
    for model in models() {
        for _ in 0..200 {
            let s = random_reference(&mut rng, &model);
            let lin = linearize(&s, &s.wind, &model);
            let (fx, fu, fw) = fd_jacobians(&s, &model);
            worst = worst.max(rel_err(&lin.f_x, &fx, 1.0)).max(rel_err(&lin.f_u, &fu, 1.0)).max(rel_err(&lin.f_w, &fw, 1e-3));
        }
        let s = hover(Vec3::zeros());
        let lin = linearize(&s, &s.wind, &model);
        let (fx, fu, _) = fd_jacobians(&s, &model);
        worst = worst.max(rel_err(&lin.f_x, &fx, 1.0)).max(rel_err(&lin.f_u, &fu, 1.0));
    }
    assert!(worst < 1e-4, "worst relative error {worst:.3e}");
}

#[test]
fn linearization_residual_is_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let model = AeroModel::flat_plate();
    for _ in 0..50 {
        let s = random_reference(&mut rng, &model);
        let lin = linearize(&s, &s.wind, &model);
        let dx = Vec9::from_fn(|_, _| rng.gen_range(-1.0..1.0)) * 1e-2;
        let du = Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0)) * 1e-2;
        let resid = |k: f64| {
            (error_dynamics(&(dx * k), &(du * k), &s, &s.wind, &s.wind, &model) - lin.f_x * dx * k - lin.f_u * du * k).norm()
        };
        let ratio = resid(1.0) / resid(0.5);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn wind_column_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let model = AeroModel::flat_plate();
    let s = random_reference(&mut rng, &model);
    let lin = linearize(&s, &s.wind, &model);
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = 1e-5;
        let d = error_dynamics(&Vec9::zeros(), &Vector4::zeros(), &s, &(s.wind + e), &s.wind, &model);
        let expect = lin.m_v * e;
        assert!((d.fixed_rows::<3>(3) - expect).norm() < 1e-4 * expect.norm());
    }
}

#[test]
fn error_state_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    for _ in 0..1000 {
        let a = VehicleState::new(vec_in(&mut rng, 0.0, 5.0), vec_in(&mut rng, 0.0, 5.0), exp_so3(&vec_in(&mut rng, 0.0, 3.1)), Vec3::zeros());
        let b = VehicleState::new(vec_in(&mut rng, 0.0, 5.0), vec_in(&mut rng, 0.0, 5.0), exp_so3(&vec_in(&mut rng, 0.0, 3.1)), Vec3::zeros());
        let e = error_state(&a, &b);
        let th = Vec3::new(e[6], e[7], e[8]);
        assert!((exp_so3(&th) - b.r.transpose() * a.r).norm() < 1e-9);
    }
}

/// Propagates the actual and reference vehicles with their own inputs and
/// winds, then differentiates the error numerically.
#[test]
fn error_dynamics_match_propagated_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let model = AeroModel::flat_plate();
    for _ in 0..50 {
        let s = random_reference(&mut rng, &model);
        let dx = Vec9::from_fn(|_, _| rng.gen_range(-0.3..0.3));
        let du = Vector4::from_fn(|_, _| rng.gen_range(-0.5..0.5));
        let wind = s.wind + vec_in(&mut rng, 0.0, 2.0);
        let x = state_from_error(&s, &dx);
        let xd = reference_state(&s);
        let omega = s.omega + Vec3::new(du[1], du[2], du[3]);
        let step = |x: &VehicleState, thrust: f64, w: &Vec3, wnd: &Vec3, h: f64| {
            // the rotation is advanced exactly for constant body rate
            let d = reduced_derivative(x, thrust, w, wnd, &model);
            VehicleState { p: x.p + h * d.dp, v: x.v + h * d.dv, r: orthonormalize(&(x.r * exp_so3(&(w * h)))), omega: *w }
        };
        let h = 1e-5;
        let ep = error_state(&step(&xd, s.thrust, &s.omega, &s.wind, h), &step(&x, s.thrust + du[0], &omega, &wind, h));
        let em = error_state(&step(&xd, s.thrust, &s.omega, &s.wind, -h), &step(&x, s.thrust + du[0], &omega, &wind, -h));
        let fd = (ep - em) / (2.0 * h);
        let an = error_dynamics(&dx, &du, &s, &wind, &s.wind, &model);
        assert!((fd - an).norm() < 1e-6 * an.norm().max(1.0), "{:.3e}", (fd - an).norm());
    }
}

fn horizon_from(s: &ReferenceSample, n: usize, dt: f64) -> Vec<ReferenceSample> {
    (0..n).map(|k| ReferenceSample { t: s.t + k as f64 * dt, ..*s }).collect()
}

#[test]
fn single_step_qp_matches_kkt_solve() {
    let model = AeroModel::flat_plate();
    let s = hover(Vec3::zeros());
    let cfg = MpcConfig { horizon: 1, u_min: [-100.0; 4], u_max: [100.0; 4], ..Default::default() };
    let mut dx0 = Vec9::zeros();
    dx0[0] = 0.5;
    dx0[5] = -0.2;
    dx0[7] = 0.1;
    let qp = build_qp(&[s], &dx0, &Vec3::zeros(), &model, &cfg);
    let sol = solve_qp(&qp, None, &cfg.qp);
    // independent oracle: δx₁ = A δx₀ + B δu, minimize ‖δx₁‖²_P + ‖δu‖²_R
    let lin = linearize(&s, &Vec3::zeros(), &model);
    let a = Mat9::identity() + cfg.dt * lin.f_x;
    let b = cfg.dt * lin.f_u;
    let p = Mat9::from_diagonal(&Vec9::from(cfg.q));
    let r = nalgebra::Matrix4::from_diagonal(&Vector4::from(cfg.r));
    let kkt = b.transpose() * p * b + r;
    let du = -kkt.lu().solve(&(b.transpose() * p * a * dx0)).unwrap();
    for i in 0..4 {
        assert!((sol.x[i] - du[i]).abs() < 1e-9 * du.norm().max(1e-6), "{} vs {}", sol.x[i], du[i]);
    }
}

#[test]
fn zero_error_gives_zero_correction() {
    let mut rng = ChaCha8Rng::seed_from_u64(75);
    let model = AeroModel::flat_plate();
    let s = random_reference(&mut rng, &model);
    let cfg = MpcConfig { u_min: [-50.0; 4], u_max: [50.0; 4], ..Default::default() };
    let qp = build_qp(&horizon_from(&s, 12, 0.01), &Vec9::zeros(), &s.wind, &model, &cfg);
    let sol = solve_qp(&qp, None, &cfg.qp);
    assert!(sol.x.norm() < 1e-12);
}

#[test]
fn hessian_eigenvalues_bounded_by_input_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(76);
    let model = AeroModel::flat_plate();
    let cfg = MpcConfig::default();
    for _ in 0..20 {
        let s = random_reference(&mut rng, &model);
        let qp = build_qp(&horizon_from(&s, 12, 0.01), &Vec9::zeros(), &s.wind, &model, &cfg);
        assert_eq!(qp.h, qp.h.transpose());
        let min_eig = qp.h.clone().symmetric_eigenvalues().min();
        assert!(min_eig >= 0.3 - 1e-9, "{min_eig}");
    }
}

fn offset_qp(rng: &mut ChaCha8Rng, model: &AeroModel, cfg: &MpcConfig) -> BoxQp {
    let s = random_reference(rng, model);
    let dx0 = Vec9::from_fn(|i, _| if i < 3 { rng.gen_range(-2.0..2.0) } else { rng.gen_range(-0.5..0.5) });
    build_qp(&horizon_from(&s, cfg.horizon, cfg.dt), &dx0, &s.wind, model, cfg)
}

#[test]
fn unconstrained_solution_equals_cholesky() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let model = AeroModel::flat_plate();
    let cfg = MpcConfig { u_min: [-1e6; 4], u_max: [1e6; 4], ..Default::default() };
    let qp = offset_qp(&mut rng, &model, &cfg);
    let sol = solve_qp(&qp, None, &cfg.qp);
    let direct = -qp.h.clone().cholesky().unwrap().solve(&qp.f);
    assert!((sol.x - &direct).norm() < 1e-9 * direct.norm().max(1.0));
}

#[test]
fn active_bounds_satisfy_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let model = AeroModel::flat_plate();
    for _ in 0..50 {
        let cfg = MpcConfig { u_min: [0.0, -1.0, -1.0, -1.0], u_max: [20.0, 1.0, 1.0, 1.0], ..Default::default() };
        let mut qp = offset_qp(&mut rng, &model, &cfg);
        // a tight box makes several bounds active
        for i in 0..qp.lo.len() {
            qp.lo[i] = -0.2;
            qp.hi[i] = 0.2;
        }
        let sol = solve_qp(&qp, None, &cfg.qp);
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(kkt_residual(&qp, &sol.x) < 1e-6);
        // independent check of the multiplier signs and stationarity
        let g = qp.gradient(&sol.x);
        let scale = g.amax().max(1.0);
        for i in 0..g.len() {
            let x = sol.x[i];
            assert!(x >= qp.lo[i] && x <= qp.hi[i]);
            if x > qp.lo[i] && x < qp.hi[i] {
                assert!(g[i].abs() < 1e-6 * qp.h[(i, i)].max(scale));
            } else if x == qp.lo[i] {
                assert!(g[i] > -1e-6 * qp.h[(i, i)]);
            } else {
                assert!(g[i] < 1e-6 * qp.h[(i, i)]);
            }
        }
    }
}

#[test]
fn solution_invariant_to_weight_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let model = AeroModel::flat_plate();
    for _ in 0..20 {
        let s = random_reference(&mut rng, &model);
        let dx0 = Vec9::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let base = MpcConfig { u_min: [0.0, -1.0, -1.0, -1.0], u_max: [20.0, 1.0, 1.0, 1.0], ..Default::default() };
        let h = horizon_from(&s, 12, 0.01);
        let a = solve_qp(&build_qp(&h, &dx0, &s.wind, &model, &base), None, &base.qp);
        for lambda in [1e-3, 0.5, 7.0, 1e4] {
            let cfg = base.scaled(lambda);
            let b = solve_qp(&build_qp(&h, &dx0, &s.wind, &model, &cfg), None, &cfg.qp);
            assert!((&a.x - &b.x).amax() < 1e-8, "λ = {lambda}: {:.3e}", (&a.x - &b.x).amax());
        }
    }
}

#[test]
fn hover_offset_tilts_toward_target() {
    let model = AeroModel::flat_plate();
    let s = hover(Vec3::new(1.0, 0.0, -5.0));
    let mut mpc = Mpc::new(MpcConfig::default(), model).unwrap();
    let x = VehicleState::hover(Vec3::new(0.0, 0.0, -5.0), &Vec3::x());
    let (u, d) = mpc.control_step(&x, &horizon_from(&s, 12, 0.01), &Vec3::zeros()).unwrap();
    // thrust axis rotates toward +x
    let x_dot = x.r * skew(&u.omega) * Vec3::x();
    assert!(x_dot.x > 0.0, "{x_dot:?}");
    let cfg = &mpc.config;
    assert!(u.thrust >= cfg.u_min[0] && u.thrust <= cfg.u_max[0]);
    for i in 0..3 {
        assert!(u.omega[i] >= cfg.u_min[i + 1] && u.omega[i] <= cfg.u_max[i + 1]);
    }
    assert_eq!(d.status, QpStatus::Solved);
}

#[test]
fn saturated_commands_stay_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let model = AeroModel::flat_plate();
    for _ in 0..50 {
        let s = random_reference(&mut rng, &model);
        let ud = s.input();
        let cfg = MpcConfig {
            u_min: [ud[0] - 0.1, ud[1] - 0.1, ud[2] - 0.1, ud[3] - 0.1],
            u_max: [ud[0] + 0.1, ud[1] + 0.1, ud[2] + 0.1, ud[3] + 0.1],
            ..Default::default()
        };
        let mut mpc = Mpc::new(cfg.clone(), model.clone()).unwrap();
        let dx = Vec9::from_fn(|_, _| rng.gen_range(-2.0..2.0));
        let x = state_from_error(&s, &dx);
        let (u, _) = mpc.control_step(&x, &horizon_from(&s, 12, 0.01), &s.wind).unwrap();
        let v = [u.thrust, u.omega.x, u.omega.y, u.omega.z];
        for i in 0..4 {
            assert!(v[i] >= cfg.u_min[i] && v[i] <= cfg.u_max[i]);
        }
    }
}

#[test]
fn condensed_solve_time_within_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let model = AeroModel::flat_plate();
    let mut mpc = Mpc::new(MpcConfig::default(), model.clone()).unwrap();
    let mut total = 0.0;
    let n = 200;
    for _ in 0..n {
        let s = random_reference(&mut rng, &model);
        let x = state_from_error(&s, &Vec9::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
        let (_, d) = mpc.control_step(&x, &horizon_from(&s, 12, 0.01), &s.wind).unwrap();
        total += d.solve_time;
    }
    let mean = total / n as f64;
    assert!(mean < 10e-3, "mean solve {:.3} ms", mean * 1e3);
}

#[test]
fn short_horizon_is_padded() {
    let model = AeroModel::flat_plate();
    let s = hover(Vec3::new(1.0, 0.0, -5.0));
    let x = VehicleState::hover(Vec3::new(0.0, 0.0, -5.0), &Vec3::x());
    let mut a = Mpc::new(MpcConfig::default(), model.clone()).unwrap();
    let mut b = Mpc::new(MpcConfig::default(), model).unwrap();
    let (ua, _) = a.control_step(&x, &[s], &Vec3::zeros()).unwrap();
    let (ub, _) = b.control_step(&x, &horizon_from(&s, 12, 0.01), &Vec3::zeros()).unwrap();
    assert_eq!(ua, ub);
}
