//! Per-point covariance construction.
//!
//! The depth-sensor model grows the uncertainty of a point exponentially with
//! its depth `d` and with the angle `α` between the viewing ray and the
//! surface normal: `U(α, d) = exp(w1·(1 − cos α) + w2·d)`. The covariance is
//! `base_scale·U·I`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::geometry::{Matrix, Vector};

/// Published weights of the angle and depth terms.
pub const DEFAULT_W1: f64 = 1.6658;
pub const DEFAULT_W2: f64 = 0.2776;
pub const DEFAULT_BASE_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinectModel {
    pub w1: f64,
    /// Per meter of depth.
    pub w2: f64,
    /// Covariance magnitude at `U = 1`, in normalized units².
    pub base_scale: f64,
}

impl Default for KinectModel {
    fn default() -> Self {
        Self {
            w1: DEFAULT_W1,
            w2: DEFAULT_W2,
            base_scale: DEFAULT_BASE_SCALE,
        }
    }
}

impl KinectModel {
    pub fn new(w1: f64, w2: f64, base_scale: f64) -> Result<Self> {
        if !(w1 > 0.0 && w2 > 0.0 && base_scale > 0.0) {
            return Err(Error::InvalidParameter(
                "w1, w2 and base_scale must be positive".into(),
            ));
        }
        Ok(Self { w1, w2, base_scale })
    }

    /// Uncertainty factor `U(α, d) ≥ 1`, `α ∈ [0, π/2)`, `d ≥ 0`.
    pub fn uncertainty(&self, alpha: f64, depth: f64) -> Result<f64> {
        if !(0.0..FRAC_PI_2).contains(&alpha) {
            return Err(Error::InvalidParameter(format!(
                "incidence angle {alpha} outside [0, π/2)"
            )));
        }
        if !(depth >= 0.0 && depth.is_finite()) {
            return Err(Error::InvalidParameter(format!("depth {depth} must be ≥ 0")));
        }
        Ok((self.w1 * (1.0 - alpha.cos()) + self.w2 * depth).exp())
    }

    pub fn covariance<const D: usize>(&self, alpha: f64, depth: f64) -> Result<Matrix<D>> {
        Ok(Matrix::<D>::identity() * (self.base_scale * self.uncertainty(alpha, depth)?))
    }
}

/// Solves for the weights that make `U(alpha_ref, 0) = U(0, depth_ref) = target_u`.
pub fn fit_weights(target_u: f64, alpha_ref: f64, depth_ref: f64) -> Result<(f64, f64)> {
    if !(target_u > 1.0 && target_u.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "target uncertainty must exceed 1, got {target_u}"
        )));
    }
    if !(alpha_ref > 0.0 && alpha_ref < FRAC_PI_2) {
        return Err(Error::InvalidParameter(format!(
            "reference angle {alpha_ref} outside (0, π/2)"
        )));
    }
    if !(depth_ref > 0.0 && depth_ref.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "reference depth {depth_ref} must be positive"
        )));
    }
    let log_u = target_u.ln();
    Ok((log_u / (1.0 - alpha_ref.cos()), log_u / depth_ref))
}

/// `variance·I` for every point.
pub fn isotropic_covariances<const D: usize>(
    points: &[Vector<D>],
    variance: f64,
) -> Result<Vec<Matrix<D>>> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "variance must be positive, got {variance}"
        )));
    }
    Ok(vec![Matrix::<D>::identity() * variance; points.len()])
}
