use nalgebra::{DMatrix, DVector};

/// Cubic spline on a uniform grid. Periodic when the first and last samples
/// coincide, natural otherwise. Arguments outside the grid are wrapped into it.
#[derive(Debug, Clone)]
pub struct UniformSpline {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    m: Vec<f64>,
    periodic: bool,
}

impl UniformSpline {
    pub fn new(x0: f64, h: f64, y: &[f64]) -> Self {
        let n = y.len() - 1;
        assert!(n >= 2 && h > 0.0);
        let periodic = (y[0] - y[n]).abs() <= 1e-12 * (1.0 + y[0].abs());
        let mut m = vec![0.0; n + 1];
        let s = 6.0 / (h * h);
        if periodic {
            // unknowns M_0..M_{n-1}, M_n = M_0
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut b = DVector::<f64>::zeros(n);
            for i in 0..n {
                let im = (i + n - 1) % n;
                let ip = (i + 1) % n;
                a[(i, im)] += 1.0;
                a[(i, i)] += 4.0;
                a[(i, ip)] += 1.0;
                b[i] = s * (y[ip] - 2.0 * y[i] + y[im]);
            }
            let sol = a.lu().solve(&b).expect("periodic spline system is nonsingular");
            m[..n].copy_from_slice(sol.as_slice());
            m[n] = m[0];
        } else {
            let k = n - 1;
            let mut a = DMatrix::<f64>::zeros(k, k);
            let mut b = DVector::<f64>::zeros(k);
            for j in 0..k {
                let i = j + 1;
                a[(j, j)] = 4.0;
                if j > 0 {
                    a[(j, j - 1)] = 1.0;
                }
                if j + 1 < k {
                    a[(j, j + 1)] = 1.0;
                }
                b[j] = s * (y[i + 1] - 2.0 * y[i] + y[i - 1]);
            }
            let sol = a.lu().solve(&b).expect("natural spline system is nonsingular");
            m[1..n].copy_from_slice(sol.as_slice());
        }
        Self { x0, h, y: y.to_vec(), m, periodic }
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    /// Value, first and second derivative.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let n = self.y.len() - 1;
        let span = self.h * n as f64;
        let mut u = x - self.x0;
        if !(0.0..=span).contains(&u) {
            u = u.rem_euclid(span);
        }
        let i = ((u / self.h).floor() as usize).min(n - 1);
        let h = self.h;
        let a = (i as f64 + 1.0) * h - u;
        let b = u - i as f64 * h;
        let (mi, mj) = (self.m[i], self.m[i + 1]);
        let ci = self.y[i] / h - mi * h / 6.0;
        let cj = self.y[i + 1] / h - mj * h / 6.0;
        let v = mi * a * a * a / (6.0 * h) + mj * b * b * b / (6.0 * h) + ci * a + cj * b;
        let d = -mi * a * a / (2.0 * h) + mj * b * b / (2.0 * h) - ci + cj;
        let dd = (mi * a + mj * b) / h;
        (v, d, dd)
    }
}
