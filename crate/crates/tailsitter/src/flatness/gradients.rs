//! Analytic gradient of the input map `(a_T, ω) = U(v, v̇, v̈)`.

use nalgebra::{SMatrix, Vector4};

use super::{
    core, residual_f, select_branch, Branch, Core, FlatSample, FlatnessCache, FlatnessConfig, FlatnessError,
    Inputs,
};
use crate::aero::AeroModel;
use crate::dynamics::WindSample;
use crate::so3::{exp_so3, skew};
use crate::{Mat3, Vec3};

type M39 = SMatrix<f64, 3, 9>;
type R9 = SMatrix<f64, 1, 9>;
pub type M49 = SMatrix<f64, 4, 9>;

/// Inputs at a flat sample together with `∂(a_T, ω)/∂(v, v̇, v̈)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputGradient {
    pub thrust: f64,
    pub omega: Vec3,
    pub branch: Branch,
    /// Rows `[a_T, ω_x, ω_y, ω_z]`, columns `[v, v̇, v̈]`.
    pub d_input: M49,
}

fn block(i: usize) -> M39 {
    let mut m = M39::zeros();
    m.fixed_view_mut::<3, 3>(0, 3 * i).copy_from(&Mat3::identity());
    m
}

fn outer(v: &Vec3, r: &R9) -> M39 {
    v * r
}

fn rows_of(a: &R9, b: &M39) -> M49 {
    let mut m = M49::zeros();
    m.fixed_view_mut::<1, 9>(0, 0).copy_from(a);
    m.fixed_view_mut::<3, 9>(1, 0).copy_from(b);
    m
}

/// d(Rξ) and d(Rᵀξ) for fixed ξ, given the column derivatives.
struct RotDiff {
    dx: M39,
    dy: M39,
    dz: M39,
}

impl RotDiff {
    fn r_xi(&self, xi: &Vec3) -> M39 {
        self.dx * xi.x + self.dy * xi.y + self.dz * xi.z
    }

    fn rt_xi(&self, xi: &Vec3) -> M39 {
        let mut m = M39::zeros();
        m.set_row(0, &(xi.transpose() * self.dx));
        m.set_row(1, &(xi.transpose() * self.dy));
        m.set_row(2, &(xi.transpose() * self.dz));
        m
    }
}

/// Geometry shared by the coordinated and small-γ branches up to the
/// angle-of-attack equation.
struct Planar {
    y: Vec3,
    dy: M39,
    u: Vec3,
    du: M39,
    v: f64,
    dv: R9,
    gamma: f64,
    dgamma: R9,
    n: f64,
    dn: R9,
    h: f64,
    dh: R9,
    /// Gradient of `‖z_fix × sp‖` (small-γ branch).
    dk: R9,
    /// Rate of the in-plane air velocity and its gradient.
    udot: Vec3,
    dudot: M39,
}

fn planar(inp: &Inputs, branch: Branch, cache: &FlatnessCache, sign_r: f64, model: &AeroModel) -> Planar {
    let dva = block(0);
    let dsp = block(1);
    let (y, dy, dk, udot, dudot) = match branch {
        Branch::Coordinated => {
            let k = inp.v_a.cross(&inp.sp);
            let kn = k.norm();
            let kh = k / kn;
            let dkv = skew(&inp.v_a) * dsp - skew(&inp.sp) * dva;
            let dy = sign_r * (Mat3::identity() - kh * kh.transpose()) * dkv / kn;
            (sign_r * kh, dy, R9::zeros(), inp.dv_a, dsp)
        }
        _ => {
            let zf = skew(&cache.z_b_fix);
            let k = zf * inp.sp;
            let kn = k.norm();
            let y = k / kn;
            let dkv = zf * dsp;
            let dy = (Mat3::identity() - y * y.transpose()) * dkv / kn;
            let dk = y.transpose() * dkv;
            // ẏ from the fixed-axis geometry, then u̇ = v̇_a − (v̇_a·y + v_a·ẏ) y − (v_a·y) ẏ
            let kd = zf * inp.jerk;
            let dkd = zf * block(2);
            let ykd = y.dot(&kd);
            let d_ykd = kd.transpose() * dy + y.transpose() * dkd;
            let yd = (kd - ykd * y) / kn;
            let dyd = (dkd - outer(&y, &d_ykd) - ykd * dy) / kn - outer(&yd, &dk) / kn;
            let s1 = inp.dv_a.dot(&y) + inp.v_a.dot(&yd);
            let ds1 = y.transpose() * dsp + inp.dv_a.transpose() * dy + yd.transpose() * dva + inp.v_a.transpose() * dyd;
            let vy = inp.v_a.dot(&y);
            let dvy = y.transpose() * dva + inp.v_a.transpose() * dy;
            let udot = inp.dv_a - s1 * y - vy * yd;
            let dudot = dsp - outer(&y, &ds1) - s1 * dy - outer(&yd, &dvy) - vy * dyd;
            (y, dy, dk, udot, dudot)
        }
    };
    let vy = inp.v_a.dot(&y);
    let u = inp.v_a - vy * y;
    let du = dva - outer(&y, &(inp.v_a.transpose() * dy + y.transpose() * dva)) - vy * dy;
    let v = u.norm();
    let dv = (u / v).transpose() * du;
    let big_y = y.dot(&u.cross(&inp.sp));
    let big_x = u.dot(&inp.sp);
    let d_big_y = u.cross(&inp.sp).transpose() * dy + inp.sp.cross(&y).transpose() * du + y.cross(&u).transpose() * dsp;
    let d_big_x = inp.sp.transpose() * du + u.transpose() * dsp;
    let gamma = big_y.atan2(big_x);
    let dgamma = (big_x * d_big_y - big_y * d_big_x) / (big_x * big_x + big_y * big_y);
    let n = inp.sp.norm();
    let dn = (inp.sp / n).transpose() * dsp;
    let q = model.half_rho_s();
    let h = model.mass * n / (q * v * v);
    let dh = h * (dn / n - 2.0 * dv / v);
    Planar { y, dy, u, du, v, dv, gamma, dgamma, n, dn, h, dh, dk, udot, dudot }
}

fn planar_gradient(c: &Core, inp: &Inputs, cache: &FlatnessCache, b: &Vector4<f64>, model: &AeroModel) -> M49 {
    let m = model.mass;
    let q = model.half_rho_s();
    let dsp = block(1);
    let djerk = block(2);
    let g = planar(inp, c.branch, cache, c.sign_r, model);
    let alpha = c.alpha;
    let (sa, ca) = alpha.sin_cos();
    let s = g.gamma - alpha;
    let cv = model.coeff_vector(alpha);
    let denom = g.h * s.cos() - cv.dc_da.z;
    let dalpha = (s.sin() * g.dh + g.h * s.cos() * g.dgamma) / denom;

    let y = g.y;
    let x = c.r.column(0).into_owned();
    let z = c.r.column(2).into_owned();
    let uh = g.u / g.v;
    let e = exp_so3(&(alpha * y));
    let d_exp_dy = -sa * skew(&uh) - (1.0 - ca) * (skew(&(skew(&y) * uh)) + skew(&y) * skew(&uh));
    let dx = outer(&(skew(&y) * x), &dalpha) + d_exp_dy * g.dy + e * (Mat3::identity() - uh * uh.transpose()) * g.du / g.v;
    let dz = skew(&x) * g.dy - skew(&y) * dx;
    let rd = RotDiff { dx, dy: g.dy, dz };

    let v = g.v;
    let dvbar = outer(&Vec3::new(ca, 0.0, sa), &g.dv) + outer(&(v * Vec3::new(-sa, 0.0, ca)), &dalpha);
    let vbar = c.vbar;
    let df = q * (outer(&(2.0 * v * cv.c), &g.dv) + outer(&(v * v * cv.dc_da), &dalpha));
    let dthrust: R9 = s.cos() * g.dn - g.n * s.sin() * (g.dgamma - dalpha) - df.row(0) / m;

    let e2 = Vec3::y();
    let d_jf_xi = |xi: &Vec3| -> M39 {
        let vb_xi = vbar.dot(xi);
        let e2xi = skew(&e2) * xi;
        let lat = vbar.dot(&e2xi);
        q * (outer(&(2.0 * vb_xi * cv.dc_da), &dalpha)
            + 2.0 * cv.c * (xi.transpose() * dvbar)
            + outer(&(lat * cv.d2c_da2), &dalpha)
            + cv.dc_da * (e2xi.transpose() * dvbar)
            + outer(&(xi.y * cv.dc_db), &g.dv)
            + outer(&(v * xi.y * cv.d2c_dbda), &dalpha))
    };

    let thrust_rate = b[0];
    let omega = Vec3::new(b[1], b[2], b[3]);

    let (dh1, drow0): (R9, R9) = match c.branch {
        Branch::Coordinated => (
            inp.dv_a.transpose() * g.dy + y.transpose() * dsp,
            (skew(&e2) * omega).transpose() * dvbar,
        ),
        _ => {
            let zf = skew(&cache.z_b_fix);
            let w = zf * inp.jerk;
            (w.transpose() * dz + (zf.transpose() * z).transpose() * djerk, omega.x * g.dk)
        }
    };
    let xi1 = c.r.transpose() * g.udot;
    let xi2 = c.jf * xi1;
    let dxi1 = rd.rt_xi(&g.udot) + c.r.transpose() * g.dudot;
    let dh2 = djerk - (rd.r_xi(&xi2) + c.r * (d_jf_xi(&xi1) + c.jf * dxi1)) / m;

    let a_vec = c.thrust * Vec3::x() + c.force / m;
    let psi_w = skew(&omega) * a_vec - c.jf * skew(&omega) * vbar / m;
    let d_psi_w = skew(&omega) * (outer(&Vec3::x(), &dthrust) + df / m)
        - (d_jf_xi(&(skew(&omega) * vbar)) + c.jf * skew(&omega) * dvbar) / m;
    let dnb = thrust_rate * dx + rd.r_xi(&psi_w) + c.r * d_psi_w;

    let rhs = rows_of(&(dh1 - drow0), &(dh2 - dnb));
    let db = c.n.lu().solve(&rhs).unwrap_or_else(|| M49::from_element(f64::NAN));
    let mut out = db;
    out.set_row(0, &dthrust);
    out
}

fn low_airspeed_gradient(c: &Core, inp: &Inputs, cache: &FlatnessCache, b: &Vector4<f64>) -> M49 {
    let dsp = block(1);
    let djerk = block(2);
    let n = inp.sp.norm();
    let x = inp.sp / n;
    let dthrust: R9 = x.transpose() * dsp;
    let dx = (Mat3::identity() - x * x.transpose()) * dsp / n;
    let zf = skew(&cache.z_b_fix);
    let y = c.y;
    let dkv = zf * dsp;
    let dy = (Mat3::identity() - y * y.transpose()) * dkv / c.k_fix;
    let z = c.r.column(2).into_owned();
    let dz = skew(&x) * dy - skew(&y) * dx;
    let rd = RotDiff { dx, dy, dz };
    let w = zf * inp.jerk;
    let dh1: R9 = w.transpose() * dz + (zf.transpose() * z).transpose() * djerk;
    let omega = Vec3::new(b[1], b[2], b[3]);
    let drow0: R9 = omega.x * (y.transpose() * dkv);
    let e1s = skew(&Vec3::x());
    let dnb = b[0] * dx + rd.r_xi(&(-c.thrust * e1s * omega)) - outer(&(c.r * e1s * omega), &dthrust);
    let rhs = rows_of(&(dh1 - drow0), &(djerk - dnb));
    let mut out = c.n.lu().solve(&rhs).unwrap_or_else(|| M49::from_element(f64::NAN));
    out.set_row(0, &dthrust);
    out
}

fn gradient_of(c: &Core, inp: &Inputs, cache: &FlatnessCache, model: &AeroModel) -> (Vector4<f64>, M49) {
    let b = c.n.lu().solve(&c.h).unwrap_or_else(|| Vector4::from_element(f64::NAN));
    let g = match c.branch {
        Branch::LowAirspeed => low_airspeed_gradient(c, inp, cache, &b),
        _ => planar_gradient(c, inp, cache, &b, model),
    };
    (b, g)
}

/// `∂(a_T, ω)/∂(v, v̇, v̈)` at a flat sample. The cache is read, not updated.
pub fn flatness_gradients(
    sample: &FlatSample,
    wind: &WindSample,
    cache: &FlatnessCache,
    model: &AeroModel,
    cfg: &FlatnessConfig,
) -> Result<M49, FlatnessError> {
    let inp = Inputs::new(sample, wind);
    let c = core(&inp, cache, model, cfg)?;
    Ok(gradient_of(&c, &inp, cache, model).1)
}

/// Inputs and their gradient, advancing the cache like the transform does.
/// Angular accelerations are not computed.
pub fn transform_with_gradient(
    sample: &FlatSample,
    wind: &WindSample,
    cache: &mut FlatnessCache,
    model: &AeroModel,
    cfg: &FlatnessConfig,
) -> Result<InputGradient, FlatnessError> {
    let inp = Inputs::new(sample, wind);
    let c = core(&inp, cache, model, cfg)?;
    let (b, d_input) = gradient_of(&c, &inp, cache, model);
    cache.x_b_prev = Some(c.r.column(0).into_owned());
    cache.y_b_prev = c.y;
    if c.branch == Branch::Coordinated {
        cache.z_b_fix = c.r.column(2).into_owned();
    }
    cache.alpha_prev = c.alpha;
    cache.branch_prev = Some(c.branch);
    Ok(InputGradient { thrust: c.thrust, omega: Vec3::new(b[1], b[2], b[3]), branch: c.branch, d_input })
}

/// For samples where the angle-of-attack equation has no root: the smallest
/// residual `|F|` over a 1° grid and its gradient with respect to `(v, v̇, v̈)`.
pub fn infeasibility_gap(
    sample: &FlatSample,
    wind: &WindSample,
    cache: &FlatnessCache,
    model: &AeroModel,
    cfg: &FlatnessConfig,
) -> Option<(f64, SMatrix<f64, 1, 9>)> {
    let inp = Inputs::new(sample, wind);
    let branch = select_branch(&inp.v_a, &inp.sp, cfg);
    if branch == Branch::LowAirspeed || model.half_rho_s() <= 0.0 {
        return None;
    }
    let sign_r = match branch {
        Branch::Coordinated => {
            if inp.v_a.cross(&inp.sp).dot(&cache.y_b_prev) >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        _ => {
            if cache.z_b_fix.cross(&inp.sp).norm() < 1e-6 * inp.sp.norm() {
                return None;
            }
            1.0
        }
    };
    let g = planar(&inp, branch, cache, sign_r, model);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=360 {
        let a = -std::f64::consts::PI + i as f64 * std::f64::consts::PI / 180.0;
        let f = residual_f(model, g.h, g.gamma, a).0;
        if f.abs() < best.0 {
            best = (f.abs(), a, f.signum());
        }
    }
    let (gap, a, sgn) = best;
    let s = g.gamma - a;
    Some((gap, sgn * (s.sin() * g.dh + g.h * s.cos() * g.dgamma)))
}
