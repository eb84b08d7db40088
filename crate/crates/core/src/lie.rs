//! Rotation and rigid-body groups in 2D and 3D.
//!
//! Poses are perturbed on the right, `T = T̄ · exp(ξ^)`, and every tangent
//! vector is stored translation first, `ξ = [ρ; φ]`. The same code path
//! serves SE(2) (3 degrees of freedom) and SE(3) (6 degrees of freedom); the
//! closed forms only branch where the planar and spatial formulas differ.

use std::fmt;
use std::ops::{Mul, Neg};
use std::sync::LazyLock;

use nalgebra::{
    DMatrix, DVector, Matrix3, Quaternion, Rotation3, SMatrix, SVector, UnitQuaternion, Vector3,
};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};

/// Below this rotation angle (rad) exp/log/Jacobians switch to second-order series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Rotations whose `‖RᵀR − I‖` exceeds this after composition are re-orthonormalized.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

// Scalar coefficients with cancellation problems use Taylor expansions below this.
const COEFF_SERIES_ANGLE: f64 = 1e-2;

/// Group dimension: planar SE(2) or spatial SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    /// Dimension of the space the group acts on.
    pub fn space(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }

    pub fn rot_dof(self) -> usize {
        match self {
            Dim::Two => 1,
            Dim::Three => 3,
        }
    }

    /// Tangent-space (and twist) dimension.
    pub fn dof(self) -> usize {
        self.space() + self.rot_dof()
    }

    /// Size of one knot's perturbation `[δξ; δϖ]`.
    pub fn state_dim(self) -> usize {
        2 * self.dof()
    }

    pub fn from_dof(dof: usize) -> Option<Dim> {
        match dof {
            3 => Some(Dim::Two),
            6 => Some(Dim::Three),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Dim {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            other => Err(format!("dimension must be 2 or 3, got {other}")),
        }
    }
}

impl From<Dim> for u8 {
    fn from(d: Dim) -> u8 {
        d.space() as u8
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}D", self.space())
    }
}

/// Lie-algebra coordinates `[ρ; φ]` of SE(2) (length 3) or SE(3) (length 6).
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent(DVector<f64>);

impl Tangent {
    pub fn new(v: DVector<f64>) -> Result<Self> {
        if Dim::from_dof(v.len()).is_none() {
            return Err(config_err(format!(
                "tangent vector must have 3 (2D) or 6 (3D) entries, got {}",
                v.len()
            )));
        }
        Ok(Tangent(v))
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(v))
    }

    pub fn zeros(dim: Dim) -> Self {
        Tangent(DVector::zeros(dim.dof()))
    }

    /// Builds `[ρ; φ]` from its translational and rotational parts.
    pub fn from_parts(rho: &[f64], phi: &[f64]) -> Result<Self> {
        let mut v = Vec::with_capacity(rho.len() + phi.len());
        v.extend_from_slice(rho);
        v.extend_from_slice(phi);
        let t = Self::new(DVector::from_vec(v))?;
        if rho.len() != t.dim().space() {
            return Err(config_err(
                "translation and rotation parts disagree on dimension",
            ));
        }
        Ok(t)
    }

    pub fn dim(&self) -> Dim {
        // Length is validated on construction.
        Dim::from_dof(self.0.len()).unwrap()
    }

    pub fn rho(&self) -> DVector<f64> {
        self.0.rows(0, self.dim().space()).into_owned()
    }

    pub fn phi(&self) -> DVector<f64> {
        let d = self.dim();
        self.0.rows(d.space(), d.rot_dof()).into_owned()
    }

    /// Rotation angle `‖φ‖`.
    pub fn angle(&self) -> f64 {
        let d = self.dim();
        self.0.rows(d.space(), d.rot_dof()).norm()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Tangent {
        Tangent(&self.0 * s)
    }
}

impl Neg for &Tangent {
    type Output = Tangent;
    fn neg(self) -> Tangent {
        Tangent(-&self.0)
    }
}

impl Neg for Tangent {
    type Output = Tangent;
    fn neg(self) -> Tangent {
        Tangent(-self.0)
    }
}

/// Rotation matrix in SO(2) or SO(3).
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    matrix: DMatrix<f64>,
}

impl Rotation {
    pub fn identity(dim: Dim) -> Self {
        let n = dim.space();
        Rotation {
            matrix: DMatrix::identity(n, n),
        }
    }

    /// Wraps an orthonormal matrix with unit determinant.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n || !(n == 2 || n == 3) {
            return Err(config_err(format!(
                "rotation must be 2x2 or 3x3, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let err = orthonormality_error(&m);
        if err > ORTHONORMAL_TOL || (m.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(arg_err(format!(
                "matrix is not a proper rotation (orthonormality error {err:.3e})"
            )));
        }
        Ok(Rotation { matrix: m })
    }

    /// Planar rotation by `angle` radians.
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation {
            matrix: DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
        }
    }

    /// Spatial rotation `exp(φ^)` from a rotation vector.
    pub fn from_rotation_vector(phi: [f64; 3]) -> Self {
        Rotation {
            matrix: to_dmatrix3(&so3_exp(&Vector3::from(phi))),
        }
    }

    /// Rotation about the world z axis (yaw), in either dimension.
    pub fn from_yaw(dim: Dim, yaw: f64) -> Self {
        match dim {
            Dim::Two => Self::from_angle(yaw),
            Dim::Three => Self::from_rotation_vector([0.0, 0.0, yaw]),
        }
    }

    /// Spatial rotation from a unit quaternion given as `[w, x, y, z]`.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(arg_err("quaternion has zero or non-finite norm"));
        }
        let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        let r = uq.to_rotation_matrix();
        Ok(Rotation {
            matrix: to_dmatrix3(r.matrix()),
        })
    }

    /// Rotation `exp(φ^)` where `φ` has 1 (2D) or 3 (3D) entries.
    pub fn exp(phi: &[f64]) -> Result<Self> {
        match phi.len() {
            1 => Ok(Self::from_angle(phi[0])),
            3 => Ok(Self::from_rotation_vector([phi[0], phi[1], phi[2]])),
            n => Err(config_err(format!(
                "rotation vector must have 1 or 3 entries, got {n}"
            ))),
        }
    }

    /// Principal-branch logarithm, returned as the rotation vector `φ`.
    pub fn log(&self) -> DVector<f64> {
        match self.dim() {
            Dim::Two => DVector::from_element(1, self.planar_angle()),
            Dim::Three => {
                let phi = so3_log(&self.matrix3());
                DVector::from_column_slice(phi.as_slice())
            }
        }
    }

    pub fn dim(&self) -> Dim {
        if self.matrix.nrows() == 2 {
            Dim::Two
        } else {
            Dim::Three
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> Rotation {
        Rotation {
            matrix: self.matrix.transpose(),
        }
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        let mut matrix = &self.matrix * &other.matrix;
        if orthonormality_error(&matrix) > ORTHONORMAL_TOL {
            matrix = orthonormalize(&matrix);
        }
        Rotation { matrix }
    }

    pub fn rotate(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    /// Geodesic rotation angle `‖log(R)‖` in `[0, π]`.
    pub fn angle(&self) -> f64 {
        match self.dim() {
            Dim::Two => self.planar_angle().abs(),
            Dim::Three => {
                let m = &self.matrix;
                let w = Vector3::new(
                    m[(2, 1)] - m[(1, 2)],
                    m[(0, 2)] - m[(2, 0)],
                    m[(1, 0)] - m[(0, 1)],
                );
                let cos = 0.5 * (m.trace() - 1.0);
                (0.5 * w.norm()).atan2(cos)
            }
        }
    }

    /// Planar heading in `(−π, π]`; for 3D rotations the yaw of the rotated x axis.
    pub fn planar_angle(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])
    }

    /// Unit quaternion `[w, x, y, z]` (3D only) with non-negative `w`.
    pub fn to_quaternion(&self) -> Result<[f64; 4]> {
        if self.dim() != Dim::Three {
            return Err(arg_err("quaternions are defined for 3D rotations only"));
        }
        let r = Rotation3::from_matrix_unchecked(self.matrix3());
        let q = UnitQuaternion::from_rotation_matrix(&r);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        Ok([s * q.w, s * q.i, s * q.j, s * q.k])
    }

    /// `‖RᵀR − I‖` (max entry).
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.matrix)
    }

    fn matrix3(&self) -> Matrix3<f64> {
        Matrix3::from_iterator(self.matrix.iter().copied())
    }
}

/// Rigid-body pose: rotation followed by translation, `x ↦ R·x + p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotation: Rotation,
    position: DVector<f64>,
}

impl Pose {
    pub fn identity(dim: Dim) -> Self {
        Pose {
            rotation: Rotation::identity(dim),
            position: DVector::zeros(dim.space()),
        }
    }

    pub fn new(rotation: Rotation, position: DVector<f64>) -> Result<Self> {
        if position.len() != rotation.dim().space() {
            return Err(config_err(format!(
                "position has {} entries but rotation is {}",
                position.len(),
                rotation.dim()
            )));
        }
        Ok(Pose { rotation, position })
    }

    pub fn from_translation(position: DVector<f64>) -> Result<Self> {
        let dim = match position.len() {
            2 => Dim::Two,
            3 => Dim::Three,
            n => {
                return Err(config_err(format!(
                    "position must have 2 or 3 entries, got {n}"
                )))
            }
        };
        Pose::new(Rotation::identity(dim), position)
    }

    pub fn dim(&self) -> Dim {
        self.rotation.dim()
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn position(&self) -> &DVector<f64> {
        &self.position
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            position: self.rotation.rotate(&other.position) + &self.position,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        let position = -rt.rotate(&self.position);
        Pose {
            rotation: rt,
            position,
        }
    }

    /// `self⁻¹ · other`.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Applies the pose to a point: `R·x + p`.
    pub fn act(&self, x: &DVector<f64>) -> DVector<f64> {
        self.rotation.rotate(x) + &self.position
    }

    /// Right retraction `self · exp(ξ^)`.
    pub fn retract(&self, xi: &Tangent) -> Pose {
        self.compose(&Pose::exp(xi))
    }

    /// Exponential map from the Lie algebra.
    pub fn exp(xi: &Tangent) -> Pose {
        let dim = xi.dim();
        let theta = xi.angle();
        let rho = xi.rho();
        if theta < SMALL_ANGLE {
            // T ≈ I + ξ^ + ½(ξ^)²
            let w = rot_hat(dim, &xi.phi());
            let w2 = &w * &w;
            let n = dim.space();
            let rotation = DMatrix::identity(n, n) + &w + &w2 * 0.5;
            let position = &rho + (&w * &rho) * 0.5;
            return Pose {
                rotation: Rotation { matrix: rotation },
                position,
            };
        }
        match dim {
            Dim::Two => {
                let th = xi.as_vector()[2];
                let v = se2_v(th);
                Pose {
                    rotation: Rotation::from_angle(th),
                    position: v * rho,
                }
            }
            Dim::Three => {
                let phi = vec3(&xi.phi());
                let r = so3_exp(&phi);
                let p = so3_left_jacobian(&phi) * vec3(&rho);
                Pose {
                    rotation: Rotation {
                        matrix: to_dmatrix3(&r),
                    },
                    position: DVector::from_column_slice(p.as_slice()),
                }
            }
        }
    }

    /// Logarithm map on the principal branch (rotation angle < π).
    pub fn log(&self) -> Tangent {
        let dim = self.dim();
        let phi = self.rotation.log();
        let theta = phi.norm();
        if std::f64::consts::PI - theta < 1e-6 {
            log::warn!("pose logarithm evaluated within 1e-6 rad of π; returning principal value");
        }
        let rho = if theta < SMALL_ANGLE {
            let w = rot_hat(dim, &phi);
            let n = dim.space();
            let vinv = DMatrix::identity(n, n) - &w * 0.5 + (&w * &w) / 12.0;
            vinv * &self.position
        } else {
            match dim {
                Dim::Two => se2_v_inv(phi[0]) * &self.position,
                Dim::Three => {
                    let r = so3_left_jacobian_inv(&vec3(&phi)) * vec3(&self.position);
                    DVector::from_column_slice(r.as_slice())
                }
            }
        };
        let mut v = rho.as_slice().to_vec();
        v.extend_from_slice(phi.as_slice());
        Tangent(DVector::from_vec(v))
    }

    /// Homogeneous `(n+1)×(n+1)` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim().space();
        let mut m = DMatrix::identity(n + 1, n + 1);
        m.view_mut((0, 0), (n, n)).copy_from(self.rotation.matrix());
        m.view_mut((0, n), (n, 1)).copy_from(&self.position);
        m
    }

    /// Adjoint `Ad(T)` acting on `[ρ; φ]` tangent vectors.
    pub fn adjoint(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let n = dim.space();
        let d = dim.dof();
        let r = self.rotation.matrix();
        let mut ad = DMatrix::zeros(d, d);
        ad.view_mut((0, 0), (n, n)).copy_from(r);
        match dim {
            Dim::Two => {
                ad[(0, 2)] = self.position[1];
                ad[(1, 2)] = -self.position[0];
                ad[(2, 2)] = 1.0;
            }
            Dim::Three => {
                let px = to_dmatrix3(&skew(&vec3(&self.position)));
                ad.view_mut((0, 3), (3, 3)).copy_from(&(px * r));
                ad.view_mut((3, 3), (3, 3)).copy_from(r);
            }
        }
        ad
    }
}

impl Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Maps `[ρ; φ]` to its `(n+1)×(n+1)` Lie-algebra matrix.
pub fn hat(xi: &Tangent) -> DMatrix<f64> {
    let dim = xi.dim();
    let n = dim.space();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n))
        .copy_from(&rot_hat(dim, &xi.phi()));
    m.view_mut((0, n), (n, 1)).copy_from(&xi.rho());
    m
}

/// Inverse of [`hat`].
pub fn vee(m: &DMatrix<f64>) -> Result<Tangent> {
    let (r, c) = m.shape();
    if r != c || !(r == 3 || r == 4) {
        return Err(config_err(format!(
            "Lie-algebra matrix must be 3x3 or 4x4, got {r}x{c}"
        )));
    }
    let n = r - 1;
    let mut v: Vec<f64> = (0..n).map(|i| m[(i, n)]).collect();
    if n == 2 {
        v.push(m[(1, 0)]);
    } else {
        v.extend_from_slice(&[m[(2, 1)], m[(0, 2)], m[(1, 0)]]);
    }
    Tangent::new(DVector::from_vec(v))
}

/// Small adjoint `ad(ξ)`, so that `ad(ξ)·η = [ξ^, η^]^∨`.
pub fn ad(xi: &Tangent) -> DMatrix<f64> {
    let dim = xi.dim();
    let d = dim.dof();
    let v = xi.as_vector();
    let mut m = DMatrix::zeros(d, d);
    match dim {
        Dim::Two => {
            let th = v[2];
            m[(0, 1)] = -th;
            m[(1, 0)] = th;
            m[(0, 2)] = v[1];
            m[(1, 2)] = -v[0];
        }
        Dim::Three => {
            let phi_x = to_dmatrix3(&skew(&Vector3::new(v[3], v[4], v[5])));
            let rho_x = to_dmatrix3(&skew(&Vector3::new(v[0], v[1], v[2])));
            m.view_mut((0, 0), (3, 3)).copy_from(&phi_x);
            m.view_mut((3, 3), (3, 3)).copy_from(&phi_x);
            m.view_mut((0, 3), (3, 3)).copy_from(&rho_x);
        }
    }
    m
}

/// Right Jacobian: `exp((ξ + δ)^) ≈ exp(ξ^)·exp((J_r(ξ)·δ)^)`.
pub fn right_jacobian(xi: &Tangent) -> DMatrix<f64> {
    let dim = xi.dim();
    let d = dim.dof();
    if xi.angle() < SMALL_ANGLE {
        let a = ad(xi);
        return DMatrix::identity(d, d) - &a * 0.5 + (&a * &a) / 6.0;
    }
    let v = xi.as_vector();
    match dim {
        Dim::Two => {
            let th = v[2];
            let mut j = DMatrix::zeros(3, 3);
            j.view_mut((0, 0), (2, 2)).copy_from(&se2_v(-th));
            let w = se2_jr_column(v[0], v[1], th);
            j[(0, 2)] = w[0];
            j[(1, 2)] = w[1];
            j[(2, 2)] = 1.0;
            j
        }
        Dim::Three => {
            let rho = Vector3::new(v[0], v[1], v[2]);
            let phi = Vector3::new(v[3], v[4], v[5]);
            let a = to_dmatrix3(&so3_left_jacobian(&-phi));
            let q = to_dmatrix3(&se3_q(&-rho, &-phi));
            let mut j = DMatrix::zeros(6, 6);
            j.view_mut((0, 0), (3, 3)).copy_from(&a);
            j.view_mut((3, 3), (3, 3)).copy_from(&a);
            j.view_mut((0, 3), (3, 3)).copy_from(&q);
            j
        }
    }
}

/// Inverse right Jacobian, series form below [`SMALL_ANGLE`], closed form above.
pub fn right_jacobian_inv(xi: &Tangent) -> DMatrix<f64> {
    if xi.angle() < SMALL_ANGLE {
        right_jacobian_inv_series(xi)
    } else {
        right_jacobian_inv_closed(xi)
    }
}

/// Second-order series `I + ½·ad(ξ) + (1/12)·ad(ξ)²`.
pub fn right_jacobian_inv_series(xi: &Tangent) -> DMatrix<f64> {
    let d = xi.dim().dof();
    let a = ad(xi);
    DMatrix::identity(d, d) + &a * 0.5 + (&a * &a) / 12.0
}

/// Closed-form inverse right Jacobian (valid for rotation angles in `(0, π]`).
pub fn right_jacobian_inv_closed(xi: &Tangent) -> DMatrix<f64> {
    let v = xi.as_vector();
    match xi.dim() {
        Dim::Two => {
            let th = v[2];
            let ainv = se2_v_inv(-th);
            let w = se2_jr_column(v[0], v[1], th);
            let b = -(&ainv * DVector::from_column_slice(&w));
            let mut j = DMatrix::zeros(3, 3);
            j.view_mut((0, 0), (2, 2)).copy_from(&ainv);
            j[(0, 2)] = b[0];
            j[(1, 2)] = b[1];
            j[(2, 2)] = 1.0;
            j
        }
        Dim::Three => {
            let rho = Vector3::new(v[0], v[1], v[2]);
            let phi = Vector3::new(v[3], v[4], v[5]);
            let ainv = so3_left_jacobian_inv(&-phi);
            let q = se3_q(&-rho, &-phi);
            let b = -(ainv * q * ainv);
            let mut j = DMatrix::zeros(6, 6);
            let ai = to_dmatrix3(&ainv);
            j.view_mut((0, 0), (3, 3)).copy_from(&ai);
            j.view_mut((3, 3), (3, 3)).copy_from(&ai);
            j.view_mut((0, 3), (3, 3)).copy_from(&to_dmatrix3(&b));
            j
        }
    }
}

/// Inverse left Jacobian, `J_l⁻¹(ξ) = J_r⁻¹(−ξ)`.
pub fn left_jacobian_inv(xi: &Tangent) -> DMatrix<f64> {
    right_jacobian_inv(&-xi)
}

// c_n = B_n·(−1)ⁿ/n!, the coefficients of J_r⁻¹(ξ) = Σ c_n·ad(ξ)ⁿ.
const MAX_SERIES_TERMS: usize = 96;

static INV_JACOBIAN_COEFFS: LazyLock<[f64; MAX_SERIES_TERMS + 1]> = LazyLock::new(|| {
    let mut c = [0.0; MAX_SERIES_TERMS + 1];
    c[0] = 1.0;
    c[1] = 0.5;
    let two_pi = 2.0 * std::f64::consts::PI;
    for n in (2..=MAX_SERIES_TERMS).step_by(2) {
        // |B_n|/n! = 2·ζ(n)/(2π)ⁿ, sign alternating starting positive at n = 2.
        let pi = std::f64::consts::PI;
        let zeta: f64 = match n {
            2 => pi.powi(2) / 6.0,
            4 => pi.powi(4) / 90.0,
            6 => pi.powi(6) / 945.0,
            8 => pi.powi(8) / 9450.0,
            _ => (1..=200).map(|k| (k as f64).powi(-(n as i32))).sum(),
        };
        let sign = if (n / 2) % 2 == 1 { 1.0 } else { -1.0 };
        c[n] = sign * 2.0 * zeta / two_pi.powi(n as i32);
    }
    c
});

/// Derivative of `J_r⁻¹(ξ)·w` with respect to `ξ`, evaluated from the
/// Bernoulli series of `J_r⁻¹` (convergent for rotation angles below 2π).
pub fn right_jacobian_inv_times_derivative(xi: &Tangent, w: &DVector<f64>) -> DMatrix<f64> {
    let dim = xi.dim();
    let d = dim.dof();
    let coeffs = &INV_JACOBIAN_COEFFS[..];

    // Terms decay like (θ/2π)ⁿ with a polynomial factor from the nilpotent part.
    let ratio = xi.angle() / (2.0 * std::f64::consts::PI);
    let scale = 1.0 + xi.rho().norm() + w.norm();
    let mut n_terms = 4;
    while n_terms < MAX_SERIES_TERMS {
        let nf = n_terms as f64;
        if ratio.powi(n_terms as i32) * nf * nf * scale * scale < 1e-18 {
            break;
        }
        n_terms += 2;
    }

    match dim {
        Dim::Two => {
            let m = dj_series::<3>(
                &SVector::from_column_slice(xi.as_vector().as_slice()),
                &SVector::from_column_slice(w.as_slice()),
                n_terms,
                coeffs,
            );
            DMatrix::from_column_slice(d, d, m.as_slice())
        }
        Dim::Three => {
            let m = dj_series::<6>(
                &SVector::from_column_slice(xi.as_vector().as_slice()),
                &SVector::from_column_slice(w.as_slice()),
                n_terms,
                coeffs,
            );
            DMatrix::from_column_slice(d, d, m.as_slice())
        }
    }
}

/// Stack-allocated `ad` for 3 (planar) or 6 (spatial) degrees of freedom.
fn ad_fixed<const D: usize>(v: &SVector<f64, D>) -> SMatrix<f64, D, D> {
    let mut m = SMatrix::<f64, D, D>::zeros();
    if D == 3 {
        m[(0, 1)] = -v[2];
        m[(1, 0)] = v[2];
        m[(0, 2)] = v[1];
        m[(1, 2)] = -v[0];
    } else {
        let phi = skew(&Vector3::new(v[3], v[4], v[5]));
        let rho = skew(&Vector3::new(v[0], v[1], v[2]));
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&phi);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&phi);
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&rho);
    }
    m
}

fn dj_series<const D: usize>(
    xi: &SVector<f64, D>,
    w: &SVector<f64, D>,
    n_terms: usize,
    coeffs: &[f64],
) -> SMatrix<f64, D, D> {
    let a = ad_fixed(xi);
    // d(adⁿ w)[η] = −Σ_k ad^k · ad(ad^{n−1−k} w) · η
    let mut u = *w;
    let mut m_terms = Vec::with_capacity(n_terms);
    for _ in 0..n_terms {
        m_terms.push(ad_fixed(&u));
        u = a * u;
    }
    // Σ_n c_n Σ_{k<n} ad^k M_{n−1−k} = Σ_k ad^k S_k,  S_k = Σ_j c_{j+k+1} M_j
    let mut acc = SMatrix::<f64, D, D>::zeros();
    for k in (0..n_terms).rev() {
        let mut s_k = a * acc;
        for (j, m) in m_terms.iter().enumerate() {
            let idx = j + k + 1;
            if idx > n_terms {
                break;
            }
            if coeffs[idx] != 0.0 {
                s_k += m * coeffs[idx];
            }
        }
        acc = s_k;
    }
    -acc
}

/// Rotational hat: `θ·[[0,−1],[1,0]]` in 2D, the skew matrix in 3D.
fn rot_hat(dim: Dim, phi: &DVector<f64>) -> DMatrix<f64> {
    match dim {
        Dim::Two => DMatrix::from_row_slice(2, 2, &[0.0, -phi[0], phi[0], 0.0]),
        Dim::Three => to_dmatrix3(&skew(&vec3(phi))),
    }
}

fn orthonormality_error(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    (m.transpose() * m - DMatrix::identity(n, n)).amax()
}

/// Nearest rotation matrix (polar factor).
fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 2 {
        let a = (m[(1, 0)] - m[(0, 1)]).atan2(m[(0, 0)] + m[(1, 1)]);
        return Rotation::from_angle(a).matrix;
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = &u * &v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u.clone();
        for i in 0..3 {
            u2[(i, 2)] = -u2[(i, 2)];
        }
        r = u2 * v_t;
    }
    r
}

fn vec3(v: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn to_dmatrix3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// (1 − cos θ)/θ², evaluated without cancellation.
fn one_minus_cos_over_sq(theta: f64) -> f64 {
    if theta.abs() < COEFF_SERIES_ANGLE {
        let t2 = theta * theta;
        0.5 - t2 / 24.0 + t2 * t2 / 720.0
    } else {
        let s = (0.5 * theta).sin();
        2.0 * s * s / (theta * theta)
    }
}

/// (θ − sin θ)/θ³.
fn theta_minus_sin_over_cube(theta: f64) -> f64 {
    if theta.abs() < COEFF_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    let w2 = w * w;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + w + w2 * 0.5;
    }
    Matrix3::identity() + w * (theta.sin() / theta) + w2 * one_minus_cos_over_sq(theta)
}

fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        );
    let cos = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    let sin = w.norm();
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        return w * (1.0 + theta * theta / 6.0);
    }
    if cos > -0.9 {
        return w * (theta / sin);
    }
    // Near π the antisymmetric part vanishes; recover the axis from R + Rᵀ.
    let b = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let one_minus_cos = 1.0 - cos;
    let mut k = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(k, k)] {
            k = i;
        }
    }
    let mut axis: Vector3<f64> =
        b.column(k).into_owned() / (b[(k, k)] * one_minus_cos).max(0.0).sqrt();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// SO(3) left Jacobian `V(φ)`, also the translation map of the SE(3) exponential.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    Matrix3::identity()
        + w * one_minus_cos_over_sq(theta)
        + w * w * theta_minus_sin_over_cube(theta)
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    let e = if theta < COEFF_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - 1.0 / (2.0 * theta * (0.5 * theta).tan())
    };
    Matrix3::identity() - w * 0.5 + w * w * e
}

/// Upper-right block of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (c1, c2, c3) = if theta < COEFF_SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let half = (0.5 * theta).sin();
        (
            (theta - s) / (t2 * theta),
            (t2 - 4.0 * half * half) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r * 0.5
        + (pr + rp + prp) * c1
        + (pp * r + rp * p - prp * 3.0) * c2
        + (prp * p + pp * r * p) * c3
}

/// Planar `V(θ)` with `exp([ρ; θ]) = (R(θ), V(θ)·ρ)`.
fn se2_v(theta: f64) -> DMatrix<f64> {
    let s = if theta.abs() < COEFF_SERIES_ANGLE {
        1.0 - theta * theta / 6.0 + theta.powi(4) / 120.0
    } else {
        theta.sin() / theta
    };
    let c = theta * one_minus_cos_over_sq(theta);
    DMatrix::from_row_slice(2, 2, &[s, -c, c, s])
}

fn se2_v_inv(theta: f64) -> DMatrix<f64> {
    let v = se2_v(theta);
    let s = v[(0, 0)];
    let c = v[(1, 0)];
    let det = s * s + c * c;
    DMatrix::from_row_slice(2, 2, &[s / det, c / det, -c / det, s / det])
}

/// Translational column of the SE(2) right Jacobian.
fn se2_jr_column(rho_x: f64, rho_y: f64, theta: f64) -> [f64; 2] {
    // (θ − sin θ)/θ² = θ·(θ − sin θ)/θ³
    let a = theta * theta_minus_sin_over_cube(theta);
    let b = one_minus_cos_over_sq(theta);
    [rho_x * a - rho_y * b, rho_x * b + rho_y * a]
}
