#![allow(dead_code)]

use nalgebra::{DMatrix, Matrix4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tailsitter::flatness::{FlatSample, FlatnessCache};
use tailsitter::{gravity, Vec3};

/// One sinusoid per axis: `amp ⊙ sin(w t + phase)`.
#[derive(Debug, Clone, Copy)]
pub struct Wave {
    pub amp: Vec3,
    pub w: f64,
    pub phase: Vec3,
}

/// `p(t) = p0 + v0 t + ½ a0 t² + Σ waves`, with exact derivatives up to snap.
#[derive(Debug, Clone)]
pub struct Analytic {
    pub p0: Vec3,
    pub v0: Vec3,
    pub a0: Vec3,
    pub waves: Vec<Wave>,
}

impl Analytic {
    pub fn sample(&self, t: f64) -> FlatSample {
        let mut d = [Vec3::zeros(); 5];
        d[0] = self.p0 + self.v0 * t + 0.5 * self.a0 * t * t;
        d[1] = self.v0 + self.a0 * t;
        d[2] = self.a0;
        for wv in &self.waves {
            for k in 0..5 {
                let scale = wv.w.powi(k as i32);
                for i in 0..3 {
                    let arg = wv.w * t + wv.phase[i] + k as f64 * std::f64::consts::FRAC_PI_2;
                    d[k][i] += wv.amp[i] * scale * arg.sin();
                }
            }
        }
        FlatSample { p: d[0], v: d[1], a: d[2], j: d[3], s: d[4] }
    }

    /// Horizontal circle of radius `r` at speed `speed`, counter-clockwise
    /// seen from above, with a slow altitude oscillation.
    pub fn loiter(r: f64, speed: f64) -> Self {
        let w = speed / r;
        let h = std::f64::consts::FRAC_PI_2;
        Self {
            p0: Vec3::new(0.0, 0.0, -30.0),
            v0: Vec3::zeros(),
            a0: Vec3::zeros(),
            waves: vec![
                Wave { amp: Vec3::new(r, r, 0.0), w, phase: Vec3::new(h, 0.0, 0.0) },
                Wave { amp: Vec3::new(0.0, 0.0, 0.4), w: 0.7, phase: Vec3::new(0.0, 0.0, 0.3) },
            ],
        }
    }

    pub fn cruise() -> Self {
        Self {
            p0: Vec3::zeros(),
            v0: Vec3::new(12.0, 1.0, -0.5),
            a0: Vec3::zeros(),
            waves: vec![
                Wave { amp: Vec3::new(0.5, 1.5, 0.6), w: 0.9, phase: Vec3::new(0.1, 0.7, 1.3) },
                Wave { amp: Vec3::new(0.1, 0.2, 0.1), w: 2.1, phase: Vec3::new(0.4, 0.2, 2.0) },
            ],
        }
    }

    /// Vertical climb at ~5 m/s with small lateral wobble; special
    /// acceleration stays nearly parallel to the velocity.
    pub fn climb() -> Self {
        Self {
            p0: Vec3::zeros(),
            v0: Vec3::new(0.0, 0.0, -5.0),
            a0: Vec3::zeros(),
            waves: vec![Wave { amp: Vec3::new(0.02, 0.015, 0.2), w: 1.1, phase: Vec3::new(0.3, 1.0, 0.2) }],
        }
    }

    /// Slow hover drift below the low-airspeed threshold.
    pub fn drift() -> Self {
        Self {
            p0: Vec3::new(1.0, 2.0, -5.0),
            v0: Vec3::zeros(),
            a0: Vec3::zeros(),
            waves: vec![Wave { amp: Vec3::new(0.1, 0.08, 0.05), w: 1.3, phase: Vec3::new(0.0, 0.5, 1.0) }],
        }
    }
}

/// Determinant by Laplace expansion along the first row.
pub fn cofactor_det(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 1 {
        return m[(0, 0)];
    }
    if n == 2 {
        return m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    }
    let mut det = 0.0;
    for c in 0..n {
        if m[(0, c)] == 0.0 {
            continue;
        }
        let minor = m.clone().remove_row(0).remove_column(c);
        let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * m[(0, c)] * cofactor_det(&minor);
    }
    det
}

pub fn cofactor_det4(m: &Matrix4<f64>) -> f64 {
    cofactor_det(&DMatrix::from_iterator(4, 4, m.iter().copied()))
}

pub fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn vec_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec3 {
    unit(rng) * rng.gen_range(lo..hi)
}

/// Rotates `base` by `angle` about an axis perpendicular to it.
pub fn tilt(rng: &mut ChaCha8Rng, base: &Vec3, angle: f64) -> Vec3 {
    let b = base.normalize();
    let mut k = b.cross(&unit(rng));
    while k.norm() < 1e-3 {
        k = b.cross(&unit(rng));
    }
    tailsitter::so3::exp_so3(&(k.normalize() * angle)) * base
}

/// Flat sample with prescribed air velocity and special acceleration.
pub fn flat_sample(rng: &mut ChaCha8Rng, v_a: Vec3, sp: Vec3, wind: &Vec3) -> FlatSample {
    FlatSample {
        p: vec_in(rng, 0.0, 10.0),
        v: v_a + wind,
        a: sp + gravity(),
        j: vec_in(rng, 0.0, 6.0),
        s: vec_in(rng, 0.0, 10.0),
    }
}

/// Coordinated-flight sample: airspeed 3..25 m/s, `v_a` at 20°..160° from `sp`.
pub fn coordinated_state(rng: &mut ChaCha8Rng) -> (FlatSample, Vec3, FlatnessCache) {
    let wind = vec_in(rng, 0.0, 4.0);
    let v_a = vec_in(rng, 3.0, 25.0);
    let angle = rng.gen_range(20f64..160.0).to_radians();
    let sp = tilt(rng, &v_a, angle).normalize() * rng.gen_range(3.0..20.0);
    let cache = random_cache(rng);
    (flat_sample(rng, v_a, sp, &wind), wind, cache)
}

/// Small-γ sample: `v_a` within 4° of `sp` (either sense).
pub fn small_gamma_state(rng: &mut ChaCha8Rng) -> (FlatSample, Vec3, FlatnessCache) {
    let wind = vec_in(rng, 0.0, 4.0);
    let v_a = vec_in(rng, 2.0, 20.0);
    let mut angle = rng.gen_range(0f64..4.0).to_radians();
    if rng.gen_bool(0.3) {
        angle = std::f64::consts::PI - angle;
    }
    let sp = tilt(rng, &v_a, angle).normalize() * rng.gen_range(3.0..20.0);
    let mut cache = random_cache(rng);
    while cache.z_b_fix.cross(&sp.normalize()).norm() < 0.2 {
        cache = random_cache(rng);
    }
    (flat_sample(rng, v_a, sp, &wind), wind, cache)
}

pub fn low_airspeed_state(rng: &mut ChaCha8Rng) -> (FlatSample, Vec3, FlatnessCache) {
    let wind = vec_in(rng, 0.0, 4.0);
    let v_a = vec_in(rng, 0.0, 0.49);
    let sp = vec_in(rng, 2.0, 20.0);
    let mut cache = random_cache(rng);
    while cache.z_b_fix.cross(&sp.normalize()).norm() < 0.2 {
        cache = random_cache(rng);
    }
    (flat_sample(rng, v_a, sp, &wind), wind, cache)
}

pub fn random_cache(rng: &mut ChaCha8Rng) -> FlatnessCache {
    let r = tailsitter::so3::exp_so3(&vec_in(rng, 0.0, 3.0));
    let mut c = FlatnessCache::from_attitude(&r);
    c.alpha_prev = rng.gen_range(-0.5..0.5);
    c
}

/// `‖a − b‖ / max(‖b‖, floor)` over matrix entries.
pub fn rel_err<const R: usize, const C: usize>(
    a: &nalgebra::SMatrix<f64, R, C>,
    b: &nalgebra::SMatrix<f64, R, C>,
    floor: f64,
) -> f64 {
    (a - b).norm() / b.norm().max(floor)
}

/// A cambered, C² tabulated model: thin-airfoil lift with post-stall roll-off.
pub fn cambered_table() -> tailsitter::aero::AeroModel {
    let table = tailsitter::aero::CoefficientTable::sample(360, |a| {
        let cl = 2.0 * a.sin() * a.cos() + 0.3 * (1.0 + a.cos()) * 0.5;
        let cd = 0.05 + 1.8 * a.sin().powi(2);
        (cl, cd, -0.5 - 0.1 * a.cos())
    })
    .unwrap();
    tailsitter::aero::AeroModel {
        coefficients: tailsitter::aero::Coefficients::Table(table),
        ..tailsitter::aero::AeroModel::flat_plate()
    }
}

/// Level cruise at 8 m/s through two jittered intermediate waypoints, two free
/// points per gap. Returns the problem with its straight-line seed.
pub fn cruise_planning_instance(
    rng: &mut ChaCha8Rng,
) -> (tailsitter::traj_opt::PlanningProblem, Vec<Vec3>, Vec<f64>) {
    use tailsitter::traj_opt::{BoundaryState, PlanningProblem};
    let v = Vec3::new(8.0, 0.0, 0.0);
    let p = PlanningProblem {
        start: BoundaryState { p: Vec3::new(0.0, 0.0, -20.0), v, ..Default::default() },
        end: BoundaryState { p: Vec3::new(36.0, 0.0, -20.0), v, ..Default::default() },
        waypoints: vec![
            Vec3::new(12.0, 1.5, -20.5) + vec_in(rng, -0.5, 0.5),
            Vec3::new(24.0, -1.0, -19.5) + vec_in(rng, -0.5, 0.5),
        ],
        control_points: 2,
        ..Default::default()
    };
    let (mut free, mut times) = p.seed();
    for q in free.iter_mut() {
        *q += vec_in(rng, -0.2, 0.2);
    }
    for t in times.iter_mut() {
        *t *= rng.gen_range(0.9..1.1);
    }
    (p, free, times)
}

/// Reference sample from the flatness transform at a random coordinated state.
pub fn random_reference(
    rng: &mut ChaCha8Rng,
    model: &tailsitter::aero::AeroModel,
) -> tailsitter::flatness::ReferenceSample {
    use tailsitter::dynamics::WindSample;
    use tailsitter::flatness::{flatness_transform, FlatnessConfig};
    loop {
        let (s, wind, mut cache) = coordinated_state(rng);
        let w = WindSample::from(wind);
        if let Ok(r) = flatness_transform(0.0, &s, &w, &mut cache, model, &FlatnessConfig::default()) {
            if r.thrust.abs() < 40.0 && r.omega.norm() < 6.0 {
                return r;
            }
        }
    }
}
