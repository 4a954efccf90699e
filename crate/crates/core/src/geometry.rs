//! Rigid-motion algebra in two and three dimensions.
//!
//! Rotations are parameterized without constraints: a single angle in 2D and
//! an axis-angle vector (exponential map) in 3D. Internally both live in a
//! 3-vector, the 2D angle being a rotation about the z axis.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};

pub type Vector<const D: usize> = SVector<f64, D>;
pub type Matrix<const D: usize> = SMatrix<f64, D, D>;

/// Below this axis-angle magnitude Rodrigues' formula is replaced by its
/// second-order Taylor expansion.
const SMALL_ANGLE: f64 = 1e-7;

/// Largest orthonormality residual accepted by [`rotation_error`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Rotation plus translation, `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<const D: usize> {
    rotation: Vector3<f64>,
    translation: Vector<D>,
}

impl<const D: usize> RigidTransform<D> {
    const SUPPORTED: () = assert!(D == 2 || D == 3, "only 2D and 3D transforms exist");

    /// Number of rotation parameters (1 in 2D, 3 in 3D).
    pub const ROTATION_PARAMS: usize = if D == 2 { 1 } else { 3 };
    /// Length of the flat parameter vector used by the optimizer.
    pub const NUM_PARAMS: usize = Self::ROTATION_PARAMS + D;

    pub fn identity() -> Self {
        #[allow(clippy::let_unit_value)]
        let () = Self::SUPPORTED;
        Self {
            rotation: Vector3::zeros(),
            translation: Vector::zeros(),
        }
    }

    pub fn from_translation(translation: Vector<D>) -> Self {
        Self {
            translation,
            ..Self::identity()
        }
    }

    /// Builds a transform from the flat layout `[rotation…, translation…]`.
    ///
    /// Panics if `params.len() != NUM_PARAMS`.
    pub fn from_params(params: &[f64]) -> Self {
        assert_eq!(params.len(), Self::NUM_PARAMS, "parameter vector length");
        let mut out = Self::identity();
        if D == 2 {
            out.rotation.z = params[0];
        } else {
            out.rotation = Vector3::new(params[0], params[1], params[2]);
        }
        let r = Self::ROTATION_PARAMS;
        out.translation = Vector::from_fn(|i, _| params[r + i]);
        out
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(Self::NUM_PARAMS);
        if D == 2 {
            p.push(self.rotation.z);
        } else {
            p.extend(self.rotation.iter());
        }
        p.extend(self.translation.iter());
        p
    }

    /// The rotation parameters: `[angle]` in 2D, the axis-angle vector in 3D.
    pub fn rotation_params(&self) -> Vec<f64> {
        self.params()[..Self::ROTATION_PARAMS].to_vec()
    }

    pub fn translation(&self) -> &Vector<D> {
        &self.translation
    }

    /// Builds a transform from a rotation matrix, which must be a proper
    /// rotation to within [`ORTHONORMAL_TOL`].
    pub fn from_matrix(rotation: &Matrix<D>, translation: Vector<D>) -> Result<Self> {
        check_rotation(rotation)?;
        let mut out = Self::from_translation(translation);
        if D == 2 {
            out.rotation.z = rotation[(1, 0)].atan2(rotation[(0, 0)]);
        } else {
            out.rotation = so3_log(&embed3(rotation));
        }
        Ok(out)
    }

    pub fn rotation_matrix(&self) -> Matrix<D> {
        if D == 2 {
            let (s, c) = self.rotation.z.sin_cos();
            let r = [[c, -s], [s, c]];
            Matrix::from_fn(|i, j| r[i][j])
        } else {
            let r = so3_exp(&self.rotation);
            Matrix::from_fn(|i, j| r[(i, j)])
        }
    }

    /// Partial derivatives of the rotation matrix with respect to each
    /// rotation parameter, in parameter order.
    pub fn rotation_jacobians(&self) -> Vec<Matrix<D>> {
        if D == 2 {
            let (s, c) = self.rotation.z.sin_cos();
            let d = [[-s, -c], [c, -s]];
            vec![Matrix::from_fn(|i, j| d[i][j])]
        } else {
            so3_exp_jacobians(&self.rotation)
                .iter()
                .map(|m| Matrix::from_fn(|i, j| m[(i, j)]))
                .collect()
        }
    }

    pub fn apply_point(&self, p: &Vector<D>) -> Vector<D> {
        self.rotation_matrix() * p + self.translation
    }

    /// Maps points by `R·p + t` and covariances by `R·Σ·Rᵀ`.
    pub fn apply(&self, cloud: &CovPointCloud<D>) -> CovPointCloud<D> {
        let r = self.rotation_matrix();
        let rt = r.transpose();
        let points = cloud
            .points
            .iter()
            .map(|p| r * p + self.translation)
            .collect();
        let covariances = cloud
            .covariances
            .iter()
            .map(|c| symmetrize(&(r * c * rt)))
            .collect();
        CovPointCloud {
            points,
            covariances,
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let r1 = self.rotation_matrix();
        let translation = r1 * other.translation + self.translation;
        let mut out = Self::from_translation(translation);
        if D == 2 {
            out.rotation.z = wrap_angle(self.rotation.z + other.rotation.z);
        } else {
            let r = embed3(&r1) * embed3(&other.rotation_matrix());
            out.rotation = so3_log(&r);
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        Self {
            rotation: -self.rotation,
            translation: -(rt * self.translation),
        }
    }
}

impl RigidTransform<2> {
    pub fn from_angle(angle: f64, translation: Vector<2>) -> Self {
        Self::from_params(&[angle, translation.x, translation.y])
    }

    pub fn angle(&self) -> f64 {
        self.rotation.z
    }
}

impl RigidTransform<3> {
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: axis_angle,
            translation,
        }
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        self.rotation
    }
}

impl<const D: usize> Default for RigidTransform<D> {
    fn default() -> Self {
        Self::identity()
    }
}

/// Points with one symmetric positive-definite covariance each.
#[derive(Debug, Clone, PartialEq)]
pub struct CovPointCloud<const D: usize> {
    points: Vec<Vector<D>>,
    covariances: Vec<Matrix<D>>,
}

impl<const D: usize> CovPointCloud<D> {
    pub fn new(points: Vec<Vector<D>>, covariances: Vec<Matrix<D>>) -> Result<Self> {
        if points.len() != covariances.len() {
            return Err(Error::LengthMismatch {
                points: points.len(),
                covariances: covariances.len(),
            });
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        if let Some(index) = covariances.iter().position(|c| !is_spd(c)) {
            return Err(Error::NotSpd { index });
        }
        Ok(Self {
            points,
            covariances,
        })
    }

    /// Every point gets `variance·I`.
    pub fn isotropic(points: Vec<Vector<D>>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variance must be positive, got {variance}"
            )));
        }
        let covariances = vec![Matrix::identity() * variance; points.len()];
        Self::new(points, covariances)
    }

    #[allow(dead_code)]
    pub(crate) fn from_parts_unchecked(
        points: Vec<Vector<D>>,
        covariances: Vec<Matrix<D>>,
    ) -> Self {
        debug_assert_eq!(points.len(), covariances.len());
        Self {
            points,
            covariances,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector<D>] {
        &self.points
    }

    pub fn covariances(&self) -> &[Matrix<D>] {
        &self.covariances
    }

    pub fn into_parts(self) -> (Vec<Vector<D>>, Vec<Matrix<D>>) {
        (self.points, self.covariances)
    }

    pub fn centroid(&self) -> Option<Vector<D>> {
        if self.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vector::zeros(), |acc, p| acc + p);
        Some(sum / self.len() as f64)
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            covariances: indices.iter().map(|&i| self.covariances[i]).collect(),
        }
    }
}

/// `‖I − R_gt·R_estᵀ‖_F`, the Frobenius distance between two rotations.
pub fn rotation_error<const D: usize>(r_gt: &Matrix<D>, r_est: &Matrix<D>) -> Result<f64> {
    check_rotation(r_gt)?;
    check_rotation(r_est)?;
    Ok((Matrix::<D>::identity() - r_gt * r_est.transpose()).norm())
}

/// `‖RᵀR − I‖_F`.
pub fn orthonormality_residual<const D: usize>(r: &Matrix<D>) -> f64 {
    (r.transpose() * r - Matrix::<D>::identity()).norm()
}

fn check_rotation<const D: usize>(r: &Matrix<D>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::NotOrthonormal {
            residual: f64::INFINITY,
        });
    }
    let residual = orthonormality_residual(r);
    if residual > ORTHONORMAL_TOL || (determinant(r) - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::NotOrthonormal { residual });
    }
    Ok(())
}

/// Nearest proper rotation in the Frobenius sense (SVD projection).
pub fn orthonormalize<const D: usize>(m: &Matrix<D>) -> Matrix<D> {
    let svd = to_dynamic(m).svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut fix = DMatrix::<f64>::identity(D, D);
    let det = (&u * &v_t).determinant();
    fix[(D - 1, D - 1)] = det.signum();
    let r = u * fix * v_t;
    Matrix::from_fn(|i, j| r[(i, j)])
}

pub fn determinant<const D: usize>(m: &Matrix<D>) -> f64 {
    match D {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => embed3(m).determinant(),
        _ => to_dynamic(m).determinant(),
    }
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue<const D: usize>(m: &Matrix<D>) -> f64 {
    if D == 2 {
        let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
        let half_trace = 0.5 * (a + c);
        let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        half_trace + radius
    } else {
        to_dynamic(m)
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn is_spd<const D: usize>(m: &Matrix<D>) -> bool {
    if !m.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    match nalgebra::Cholesky::new(*m) {
        Some(chol) => chol.l().diagonal().iter().all(|&d| d > 0.0),
        None => false,
    }
}

pub(crate) fn symmetrize<const D: usize>(m: &Matrix<D>) -> Matrix<D> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn to_dynamic<const D: usize>(m: &Matrix<D>) -> DMatrix<f64> {
    DMatrix::from_fn(D, D, |i, j| m[(i, j)])
}

fn embed3<const D: usize>(m: &Matrix<D>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| {
        if i < D && j < D {
            m[(i, j)]
        } else if i == j {
            1.0
        } else {
            0.0
        }
    })
}

fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + k + k2 * 0.5
    } else {
        let (s, c) = theta.sin_cos();
        Matrix3::identity() + k * (s / theta) + k2 * ((1.0 - c) / (theta * theta))
    }
}

/// `∂R/∂ω_k = (ω_k[ω]× + [ω × (I − R)e_k]×) R / ‖ω‖²`.
fn so3_exp_jacobians(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2.sqrt() < SMALL_ANGLE {
        let kw = skew(w);
        return basis.map(|e| {
            let ke = skew(&e);
            ke + (ke * kw + kw * ke) * 0.5
        });
    }
    let r = so3_exp(w);
    let kw = skew(w);
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        let wk = w.dot(&e);
        let v = w.cross(&(i_minus_r * e));
        (kw * wk + skew(&v)) * r / theta2
    })
}

fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5;
    let sin = w.norm();
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        return w;
    }
    if theta < PI / 2.0 {
        return w * (theta / sin);
    }
    // the antisymmetric part vanishes towards π; recover the axis from the
    // symmetric part instead
    let sym = (r + r.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * cos) / (1.0 - cos);
    let k = (0..3)
        .max_by(|&a, &b| aat[(a, a)].total_cmp(&aat[(b, b)]))
        .unwrap_or(0);
    let mut axis: Vector3<f64> = aat.column(k) / aat[(k, k)].max(f64::MIN_POSITIVE).sqrt();
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}
