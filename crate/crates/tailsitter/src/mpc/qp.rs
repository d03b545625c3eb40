//! Dense box-constrained QP: direct Cholesky solve when no bound is active,
//! otherwise ADMM with periodic active-set polishing.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

/// `min xᵀHx + 2fᵀx` subject to `lo ≤ x ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl BoxQp {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.h * x)[0] + 2.0 * self.f.dot(x)
    }

    /// Half the objective gradient, `Hx + f`.
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.f
    }

    fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().enumerate().map(|(i, v)| v.clamp(self.lo[i], self.hi[i])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub max_iterations: usize,
    /// Bound on the KKT residual, in units of the variables.
    pub tolerance: f64,
    /// ADMM penalty relative to the mean Hessian diagonal.
    pub rho_scale: f64,
    /// ADMM iterations between polishing attempts.
    pub polish_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { max_iterations: 500, tolerance: 1e-6, rho_scale: 1.0, polish_every: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    NotConvex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Projected-gradient residual `max |x − Π(x − D⁻¹(Hx + f))|` with `D` the
/// Hessian diagonal. It vanishes exactly at KKT points (stationarity on free
/// variables, correctly signed multipliers on active bounds) and is invariant
/// to scaling of `H` and `f`.
pub fn kkt_residual(qp: &BoxQp, x: &DVector<f64>) -> f64 {
    let g = qp.gradient(x);
    (0..x.len())
        .map(|i| {
            let d = qp.h[(i, i)].max(f64::MIN_POSITIVE);
            (x[i] - (x[i] - g[i] / d).clamp(qp.lo[i], qp.hi[i])).abs()
        })
        .fold(0.0, f64::max)
}

pub(crate) fn active_count(qp: &BoxQp, x: &DVector<f64>) -> usize {
    (0..x.len()).filter(|&i| x[i] <= qp.lo[i] || x[i] >= qp.hi[i]).count()
}

fn inside(qp: &BoxQp, x: &DVector<f64>) -> bool {
    (0..x.len()).all(|i| x[i] >= qp.lo[i] && x[i] <= qp.hi[i])
}

/// Primal-dual active-set iterations from the guess `x`; `None` when the
/// sets cycle or a reduced system is singular.
fn polish(qp: &BoxQp, x: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let n = x.len();
    let d: Vec<f64> = (0..n).map(|i| qp.h[(i, i)]).collect();
    let mut x = x.clone();
    let mut lam = -qp.gradient(&x);
    let mut prev: Option<Vec<i8>> = None;
    for _ in 0..20 {
        // -1 at the lower bound, 1 at the upper bound, 0 free
        let set: Vec<i8> = (0..n)
            .map(|i| {
                let t = x[i] + lam[i] / d[i];
                if t < qp.lo[i] {
                    -1
                } else if t > qp.hi[i] {
                    1
                } else {
                    0
                }
            })
            .collect();
        if prev.as_ref() == Some(&set) {
            break;
        }
        let free: Vec<usize> = (0..n).filter(|&i| set[i] == 0).collect();
        for i in 0..n {
            match set[i] {
                -1 => x[i] = qp.lo[i],
                1 => x[i] = qp.hi[i],
                _ => {}
            }
        }
        if !free.is_empty() {
            let m = free.len();
            let mut hff = DMatrix::zeros(m, m);
            let mut rhs = DVector::zeros(m);
            for (a, &i) in free.iter().enumerate() {
                let mut r = -qp.f[i];
                for j in 0..n {
                    if set[j] != 0 {
                        r -= qp.h[(i, j)] * x[j];
                    }
                }
                rhs[a] = r;
                for (b, &j) in free.iter().enumerate() {
                    hff[(a, b)] = qp.h[(i, j)];
                }
            }
            let sol = Cholesky::new(hff)?.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                x[i] = sol[a];
            }
        }
        lam = -qp.gradient(&x);
        for &i in &free {
            lam[i] = 0.0;
        }
        prev = Some(set);
    }
    let x = qp.clamp(&x);
    (kkt_residual(qp, &x) < tol).then_some(x)
}

pub fn solve_qp(qp: &BoxQp, warm: Option<&DVector<f64>>, settings: &QpSettings) -> QpSolution {
    let n = qp.f.len();
    let Some(chol) = Cholesky::new(qp.h.clone()) else {
        return QpSolution { x: DVector::zeros(n), status: QpStatus::NotConvex, iterations: 0, kkt_residual: f64::INFINITY };
    };
    let x_free = -chol.solve(&qp.f);
    if inside(qp, &x_free) {
        let kkt = kkt_residual(qp, &x_free);
        return QpSolution { x: x_free, status: QpStatus::Solved, iterations: 0, kkt_residual: kkt };
    }
    let tol = settings.tolerance;
    let start = qp.clamp(warm.unwrap_or(&x_free));
    if let Some(x) = polish(qp, &start, tol) {
        let kkt = kkt_residual(qp, &x);
        return QpSolution { x, status: QpStatus::Solved, iterations: 0, kkt_residual: kkt };
    }

    let rho = settings.rho_scale * qp.h.trace() / n as f64;
    let k: Cholesky<f64, Dyn> = Cholesky::new(&qp.h + DMatrix::identity(n, n) * rho).expect("H + ρI is positive definite");
    let mut z = start;
    let mut w = DVector::zeros(n);
    for it in 1..=settings.max_iterations {
        let x = k.solve(&((&z - &w) * rho - &qp.f));
        z = qp.clamp(&(&x + &w));
        w += &x - &z;
        if it % settings.polish_every.max(1) == 0 {
            if let Some(x) = polish(qp, &z, tol) {
                let kkt = kkt_residual(qp, &x);
                return QpSolution { x, status: QpStatus::Solved, iterations: it, kkt_residual: kkt };
            }
            let kkt = kkt_residual(qp, &z);
            if kkt < tol {
                return QpSolution { x: z, status: QpStatus::Solved, iterations: it, kkt_residual: kkt };
            }
        }
    }
    let kkt = kkt_residual(qp, &z);
    QpSolution { x: z, status: QpStatus::MaxIterations, iterations: settings.max_iterations, kkt_residual: kkt }
}
