//! Banded LU without pivoting, sized for the block structure of the
//! trajectory interpolation system.

use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    /// Row-major band storage, `lower + upper + 1` entries per row.
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        Self { n, lower, upper, data: vec![0.0; n * (lower + upper + 1)] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    fn index(&self, r: usize, c: usize) -> usize {
        debug_assert!(c + self.lower >= r && c <= r + self.upper, "({r}, {c}) outside band");
        r * (self.lower + self.upper + 1) + (c + self.lower - r)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if c + self.lower < r || c > r + self.upper {
            return 0.0;
        }
        self.data[self.index(r, c)]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let i = self.index(r, c);
        self.data[i] = v;
    }

    /// In-place LU factorization. Fails on a pivot smaller than `tol`
    /// relative to the largest entry.
    pub fn factor(mut self, tol: f64) -> Result<BandedLu, f64> {
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..self.n {
            let piv = self.get(k, k);
            if !(piv.abs() > tol * scale) {
                return Err(piv);
            }
            let rmax = (k + self.lower).min(self.n - 1);
            let cmax = (k + self.upper).min(self.n - 1);
            for r in k + 1..=rmax {
                let f = self.get(r, k) / piv;
                if f == 0.0 {
                    continue;
                }
                let i = self.index(r, k);
                self.data[i] = f;
                for c in k + 1..=cmax {
                    let v = self.get(r, c) - f * self.get(k, c);
                    self.set(r, c, v);
                }
            }
        }
        Ok(BandedLu { m: self })
    }
}

/// `L` (unit lower) and `U` stored in one band.
#[derive(Debug, Clone)]
pub struct BandedLu {
    m: BandedMatrix,
}

impl BandedLu {
    /// Solves `A X = B` in place, column by column.
    pub fn solve_mut(&self, b: &mut DMatrix<f64>) {
        let a = &self.m;
        let n = a.n;
        for col in 0..b.ncols() {
            for r in 0..n {
                let lo = r.saturating_sub(a.lower);
                let mut s = b[(r, col)];
                for c in lo..r {
                    s -= a.get(r, c) * b[(c, col)];
                }
                b[(r, col)] = s;
            }
            for r in (0..n).rev() {
                let hi = (r + a.upper).min(n - 1);
                let mut s = b[(r, col)];
                for c in r + 1..=hi {
                    s -= a.get(r, c) * b[(c, col)];
                }
                b[(r, col)] = s / a.get(r, r);
            }
        }
    }

    /// Solves `Aᵀ X = B` in place (`Uᵀ` forward, then `Lᵀ` backward).
    pub fn solve_transpose_mut(&self, b: &mut DMatrix<f64>) {
        let a = &self.m;
        let n = a.n;
        for col in 0..b.ncols() {
            for r in 0..n {
                let lo = r.saturating_sub(a.upper);
                let mut s = b[(r, col)];
                for c in lo..r {
                    s -= a.get(c, r) * b[(c, col)];
                }
                b[(r, col)] = s / a.get(r, r);
            }
            for r in (0..n).rev() {
                let hi = (r + a.lower).min(n - 1);
                let mut s = b[(r, col)];
                for c in r + 1..=hi {
                    s -= a.get(c, r) * b[(c, col)];
                }
                b[(r, col)] = s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (BandedMatrix, DMatrix<f64>) {
        let n = 9;
        let mut m = BandedMatrix::zeros(n, 2, 1);
        let mut d = DMatrix::zeros(n, n);
        for r in 0..n {
            for c in r.saturating_sub(2)..=(r + 1).min(n - 1) {
                let v = if r == c { 4.0 + r as f64 } else { 0.3 * (r as f64 - 2.0 * c as f64).sin() };
                m.set(r, c, v);
                d[(r, c)] = v;
            }
        }
        (m, d)
    }

    #[test]
    fn solves_match_dense() {
        let (m, d) = sample();
        let lu = m.factor(1e-14).unwrap();
        let b = DMatrix::from_fn(9, 2, |r, c| (r * 3 + c) as f64 - 4.0);
        let mut x = b.clone();
        lu.solve_mut(&mut x);
        assert!((&d * &x - &b).norm() < 1e-12);
        let mut y = b.clone();
        lu.solve_transpose_mut(&mut y);
        assert!((d.transpose() * &y - &b).norm() < 1e-12);
    }

    #[test]
    fn zero_pivot_is_reported() {
        let m = BandedMatrix::zeros(3, 1, 1);
        assert!(m.factor(1e-14).is_err());
    }
}
