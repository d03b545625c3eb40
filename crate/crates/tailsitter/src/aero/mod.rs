//! Aerodynamic coefficient models, forces, moments and the force Jacobian.

mod spline;

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::skew;
use crate::{Mat3, Vec3};
pub use spline::UniformSpline;

#[derive(Debug, Error)]
pub enum AeroError {
    #[error("invalid coefficient table: {0}")]
    InvalidTable(String),
    #[error("invalid aero model: {0}")]
    InvalidModel(String),
    #[error("cannot read aero model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse aero model file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Lift/drag/side-force coefficients at one angle of attack (β = 0 slice),
/// with first and second derivatives in α.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoeffEval {
    pub cl: f64,
    pub cl_a: f64,
    pub cl_aa: f64,
    pub cd: f64,
    pub cd_a: f64,
    pub cd_aa: f64,
    /// ∂C_Y/∂β and its α-derivative.
    pub cy_b: f64,
    pub cy_b_a: f64,
}

/// Body-axis force coefficient vector `c(α)` and its derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffVector {
    pub c: Vec3,
    pub dc_da: Vec3,
    pub d2c_da2: Vec3,
    /// ∂c/∂β at β = 0, i.e. `[0, ∂C_Y/∂β, 0]`.
    pub dc_db: Vec3,
    /// ∂²c/∂β∂α.
    pub d2c_dbda: Vec3,
}

#[derive(Debug, Clone)]
pub struct CoefficientTable {
    alpha_grid: Vec<f64>,
    cl: Vec<f64>,
    cd: Vec<f64>,
    dcy_dbeta: Vec<f64>,
    cl_s: UniformSpline,
    cd_s: UniformSpline,
    cy_s: UniformSpline,
}

impl CoefficientTable {
    pub fn new(
        alpha_grid: Vec<f64>,
        cl: Vec<f64>,
        cd: Vec<f64>,
        dcy_dbeta: Vec<f64>,
    ) -> Result<Self, AeroError> {
        let n = alpha_grid.len();
        if n < 4 {
            return Err(AeroError::InvalidTable("need at least 4 grid points".into()));
        }
        if cl.len() != n || cd.len() != n || dcy_dbeta.len() != n {
            return Err(AeroError::InvalidTable("column lengths differ from alpha_grid".into()));
        }
        let h = (alpha_grid[n - 1] - alpha_grid[0]) / (n - 1) as f64;
        if (alpha_grid[0] + PI).abs() > 1e-9 || (alpha_grid[n - 1] - PI).abs() > 1e-9 {
            return Err(AeroError::InvalidTable("alpha_grid must span [-pi, pi]".into()));
        }
        for (i, a) in alpha_grid.iter().enumerate() {
            if (a - (alpha_grid[0] + i as f64 * h)).abs() > 1e-9 {
                return Err(AeroError::InvalidTable("alpha_grid must be uniform".into()));
            }
        }
        if let Some(bad) = cd.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(AeroError::InvalidTable(format!("negative or non-finite CD {bad}")));
        }
        if cl.iter().chain(dcy_dbeta.iter()).any(|v| !v.is_finite()) {
            return Err(AeroError::InvalidTable("non-finite coefficient".into()));
        }
        let x0 = alpha_grid[0];
        Ok(Self {
            cl_s: UniformSpline::new(x0, h, &cl),
            cd_s: UniformSpline::new(x0, h, &cd),
            cy_s: UniformSpline::new(x0, h, &dcy_dbeta),
            alpha_grid,
            cl,
            cd,
            dcy_dbeta,
        })
    }

    /// Samples an arbitrary coefficient function onto `n` uniform intervals.
    pub fn sample(n: usize, f: impl Fn(f64) -> (f64, f64, f64)) -> Result<Self, AeroError> {
        let h = 2.0 * PI / n as f64;
        let grid: Vec<f64> = (0..=n).map(|i| -PI + i as f64 * h).collect();
        let vals: Vec<_> = grid.iter().map(|a| f(*a)).collect();
        Self::new(
            grid,
            vals.iter().map(|v| v.0).collect(),
            vals.iter().map(|v| v.1).collect(),
            vals.iter().map(|v| v.2).collect(),
        )
    }

    fn eval(&self, alpha: f64) -> CoeffEval {
        let (cl, cl_a, cl_aa) = self.cl_s.eval(alpha);
        let (cd, cd_a, cd_aa) = self.cd_s.eval(alpha);
        let (cy_b, cy_b_a, _) = self.cy_s.eval(alpha);
        CoeffEval { cl, cl_a, cl_aa, cd, cd_a, cd_aa, cy_b, cy_b_a }
    }
}

#[derive(Debug, Clone)]
pub enum Coefficients {
    /// `C_L = 2 sinα cosα`, `C_D = 2 sin²α`, constant `∂C_Y/∂β`.
    FlatPlate { dcy_dbeta: f64 },
    Table(CoefficientTable),
}

impl Coefficients {
    pub fn eval(&self, alpha: f64) -> CoeffEval {
        match self {
            Coefficients::FlatPlate { dcy_dbeta } => {
                let (s2, c2) = (2.0 * alpha).sin_cos();
                CoeffEval {
                    cl: s2,
                    cl_a: 2.0 * c2,
                    cl_aa: -4.0 * s2,
                    cd: 1.0 - c2,
                    cd_a: 2.0 * s2,
                    cd_aa: 4.0 * c2,
                    cy_b: *dcy_dbeta,
                    cy_b_a: 0.0,
                }
            }
            Coefficients::Table(t) => t.eval(alpha),
        }
    }
}

/// Moment coefficients `[C_l, C_m, C_n]` as a function of the airflow.
pub type MomentFn = Arc<dyn Fn(&AirflowState) -> Vec3 + Send + Sync>;

#[derive(Clone, Default)]
pub enum MomentModel {
    #[default]
    Zero,
    Constant(Vec3),
    Custom(MomentFn),
}

impl fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentModel::Zero => write!(f, "Zero"),
            MomentModel::Constant(c) => write!(f, "Constant({:?})", c.as_slice()),
            MomentModel::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForceMode {
    /// β taken as zero: no side force, lateral airspeed only enters through V.
    Coordinated,
    /// Side force `C_Y = (∂C_Y/∂β)·β`.
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AirflowState {
    pub airspeed: f64,
    pub alpha: f64,
    pub beta: f64,
    pub v_body: Vec3,
    pub degenerate: bool,
}

pub fn airflow_angles(v_ab: &Vec3) -> AirflowState {
    let v = v_ab.norm();
    if v == 0.0 {
        return AirflowState { airspeed: 0.0, alpha: 0.0, beta: 0.0, v_body: *v_ab, degenerate: true };
    }
    AirflowState {
        airspeed: v,
        alpha: v_ab.z.atan2(v_ab.x),
        beta: (v_ab.y / v).clamp(-1.0, 1.0).asin(),
        v_body: *v_ab,
        degenerate: false,
    }
}

#[derive(Debug, Clone)]
pub struct AeroModel {
    pub rho: f64,
    pub area: f64,
    pub chord: f64,
    pub mass: f64,
    pub inertia: Mat3,
    pub coefficients: Coefficients,
    pub moments: MomentModel,
}

impl Default for AeroModel {
    fn default() -> Self {
        Self::flat_plate()
    }
}

impl AeroModel {
    /// Flat-plate coefficients on a 2.4 kg airframe.
    pub fn flat_plate() -> Self {
        Self {
            rho: 1.225,
            area: 0.3,
            chord: 0.25,
            mass: 2.4,
            inertia: Mat3::from_diagonal(&Vector3::new(0.08, 0.03, 0.1)),
            coefficients: Coefficients::FlatPlate { dcy_dbeta: -0.5 },
            moments: MomentModel::Zero,
        }
    }

    pub fn with_half_rho_s(mut self, q: f64) -> Self {
        self.area = 2.0 * q / self.rho;
        self
    }

    pub fn half_rho_s(&self) -> f64 {
        0.5 * self.rho * self.area
    }

    pub fn validate(&self) -> Result<(), AeroError> {
        let pos = [self.rho, self.mass, self.chord];
        if pos.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.area >= 0.0) {
            return Err(AeroError::InvalidModel("rho, m, cbar must be positive and S nonnegative".into()));
        }
        let j = self.inertia;
        if (j - j.transpose()).norm() > 1e-12 * j.norm() || j.cholesky().is_none() {
            return Err(AeroError::InvalidModel("J must be symmetric positive definite".into()));
        }
        Ok(())
    }

    pub fn coeff_vector(&self, alpha: f64) -> CoeffVector {
        let k = self.coefficients.eval(alpha);
        let (s, c) = alpha.sin_cos();
        let cx = -k.cd * c + k.cl * s;
        let cz = -k.cd * s - k.cl * c;
        let cx_a = -k.cd_a * c + k.cd * s + k.cl_a * s + k.cl * c;
        let cz_a = -k.cd_a * s - k.cd * c - k.cl_a * c + k.cl * s;
        let cx_aa = -k.cd_aa * c + 2.0 * k.cd_a * s + k.cd * c + k.cl_aa * s + 2.0 * k.cl_a * c
            - k.cl * s;
        let cz_aa = -k.cd_aa * s - 2.0 * k.cd_a * c + k.cd * s - k.cl_aa * c + 2.0 * k.cl_a * s
            + k.cl * c;
        CoeffVector {
            c: Vector3::new(cx, 0.0, cz),
            dc_da: Vector3::new(cx_a, 0.0, cz_a),
            d2c_da2: Vector3::new(cx_aa, 0.0, cz_aa),
            dc_db: Vector3::new(0.0, k.cy_b, 0.0),
            d2c_dbda: Vector3::new(0.0, k.cy_b_a, 0.0),
        }
    }

    /// Aerodynamic force in body axes for body-frame air velocity `v_ab`.
    pub fn force_body(&self, v_ab: &Vec3, mode: ForceMode) -> Vec3 {
        let air = airflow_angles(v_ab);
        if air.degenerate {
            return Vec3::zeros();
        }
        let cv = self.coeff_vector(air.alpha);
        let q = self.half_rho_s() * air.airspeed * air.airspeed;
        match mode {
            ForceMode::Coordinated => q * cv.c,
            ForceMode::Full => q * (cv.c + cv.dc_db * air.beta),
        }
    }

    /// Aerodynamic force in body axes for world-frame air velocity `v_a`.
    pub fn force(&self, r: &Mat3, v_a: &Vec3, mode: ForceMode) -> Vec3 {
        self.force_body(&(r.transpose() * v_a), mode)
    }

    /// `∂f_a/∂v_a^B` at β = 0; the lateral component of `v_ab` is ignored.
    pub fn force_jacobian(&self, v_ab: &Vec3) -> Mat3 {
        let vb = Vector3::new(v_ab.x, 0.0, v_ab.z);
        let v = vb.norm();
        if v < 1e-9 {
            return Mat3::zeros();
        }
        let alpha = vb.z.atan2(vb.x);
        let cv = self.coeff_vector(alpha);
        let e2 = Vec3::y();
        self.half_rho_s()
            * (2.0 * cv.c * vb.transpose()
                + cv.dc_da * (vb.transpose() * skew(&e2))
                + v * cv.dc_db * e2.transpose())
    }

    pub fn moment(&self, air: &AirflowState) -> Vec3 {
        let coeffs = match &self.moments {
            MomentModel::Zero => return Vec3::zeros(),
            MomentModel::Constant(c) => *c,
            MomentModel::Custom(f) => f(air),
        };
        self.half_rho_s() * self.chord * air.airspeed * air.airspeed * coeffs
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AeroError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, AeroError> {
        let file: AeroModelFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn to_file(&self) -> AeroModelFile {
        AeroModelFile::from(self)
    }
}

/// On-disk form of [`AeroModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeroModelFile {
    pub rho: f64,
    #[serde(rename = "S")]
    pub area: f64,
    pub cbar: f64,
    pub m: f64,
    #[serde(rename = "J")]
    pub inertia: [f64; 9],
    #[serde(flatten)]
    pub coefficients: CoefficientSpec,
    /// Constant moment coefficients `[C_l, C_m, C_n]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_coefficients: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientSpec {
    FlatPlate {
        #[serde(rename = "dCY_dbeta", default = "default_dcy")]
        dcy_dbeta: f64,
    },
    Table {
        alpha_grid: Vec<f64>,
        #[serde(rename = "CL")]
        cl: Vec<f64>,
        #[serde(rename = "CD")]
        cd: Vec<f64>,
        #[serde(rename = "dCY_dbeta")]
        dcy_dbeta: Vec<f64>,
    },
}

fn default_dcy() -> f64 {
    -0.5
}

impl TryFrom<AeroModelFile> for AeroModel {
    type Error = AeroError;

    fn try_from(f: AeroModelFile) -> Result<Self, AeroError> {
        let coefficients = match f.coefficients {
            CoefficientSpec::FlatPlate { dcy_dbeta } => Coefficients::FlatPlate { dcy_dbeta },
            CoefficientSpec::Table { alpha_grid, cl, cd, dcy_dbeta } => {
                Coefficients::Table(CoefficientTable::new(alpha_grid, cl, cd, dcy_dbeta)?)
            }
        };
        let model = AeroModel {
            rho: f.rho,
            area: f.area,
            chord: f.cbar,
            mass: f.m,
            inertia: Mat3::from_row_slice(&f.inertia),
            coefficients,
            moments: match f.moment_coefficients {
                Some(c) => MomentModel::Constant(Vec3::from(c)),
                None => MomentModel::Zero,
            },
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<&AeroModel> for AeroModelFile {
    fn from(m: &AeroModel) -> Self {
        let mut inertia = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                inertia[3 * r + c] = m.inertia[(r, c)];
            }
        }
        let coefficients = match &m.coefficients {
            Coefficients::FlatPlate { dcy_dbeta } => CoefficientSpec::FlatPlate { dcy_dbeta: *dcy_dbeta },
            Coefficients::Table(t) => CoefficientSpec::Table {
                alpha_grid: t.alpha_grid.clone(),
                cl: t.cl.clone(),
                cd: t.cd.clone(),
                dcy_dbeta: t.dcy_dbeta.clone(),
            },
        };
        AeroModelFile {
            rho: m.rho,
            area: m.area,
            cbar: m.chord,
            m: m.mass,
            inertia,
            coefficients,
            moment_coefficients: match m.moments {
                MomentModel::Constant(c) => Some([c.x, c.y, c.z]),
                _ => None,
            },
        }
    }
}
