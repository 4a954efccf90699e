//! Gaussian densities, pair coefficients and the registration objective.
//!
//! The objective minimized in each M-step is
//!
//! ```text
//! E(R, t) = Σ_n Σ_m C(m, n) · (R·y_m0 + t − x_n)ᵀ A_mn (R·y_m0 + t − x_n)
//! A_mn    = Σ_xn⁻¹ + Σ_ym⁻¹
//! ```
//!
//! where the coefficients `C` and the inverse sums `A` are frozen at the
//! previous estimate. `Σ_ym` is the moving covariance rotated by the previous
//! rotation and inflated by `σ²·I`.

use std::f64::consts::PI;

use nalgebra::Cholesky;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{max_eigenvalue, CovPointCloud, Matrix, RigidTransform, Vector};

/// Exponents below this are flushed to zero.
pub const UNDERFLOW_EXPONENT: f64 = -700.0;

/// Default pruning radius, in standard deviations of the broader covariance
/// of a pair.
pub const DEFAULT_CUTOFF: f64 = 6.0;

fn flushed_exp(x: f64) -> f64 {
    if x < UNDERFLOW_EXPONENT {
        0.0
    } else {
        x.exp()
    }
}

fn quad<const D: usize>(d: &Vector<D>, m: &Matrix<D>) -> f64 {
    d.dot(&(m * d))
}

/// Normal density at `tau` given the inverse covariance and its log-determinant
/// (of the covariance, not the inverse).
pub fn gaussian_density<const D: usize>(
    tau: &Vector<D>,
    mu: &Vector<D>,
    cov_inv: &Matrix<D>,
    logdet: f64,
) -> f64 {
    let d = tau - mu;
    let norm = (2.0 * PI).powf(-(D as f64) / 2.0) * (-0.5 * logdet).exp();
    norm * flushed_exp(-0.5 * quad(&d, cov_inv))
}

/// `C(m, n) = (2π)^(−D)·|Σx|^(−½)·|Σy|^(−½)·[exp(−½dᵀΣx⁻¹d) + exp(−½dᵀΣy⁻¹d)]`
/// with `d = y − x`.
pub fn pair_coefficient<const D: usize>(
    x: &Vector<D>,
    x_inv: &Matrix<D>,
    logdet_x: f64,
    y: &Vector<D>,
    y_inv: &Matrix<D>,
    logdet_y: f64,
) -> f64 {
    let d = y - x;
    let norm = (2.0 * PI).powi(-(D as i32)) * (-0.5 * (logdet_x + logdet_y)).exp();
    norm * (flushed_exp(-0.5 * quad(&d, x_inv)) + flushed_exp(-0.5 * quad(&d, y_inv)))
}

/// Inverses and log-determinants of the fixed covariances and of the
/// σ-inflated moving covariances `R·Σ_y0·Rᵀ + σ²·I`.
#[derive(Debug, Clone)]
pub struct EffectiveCovariances<const D: usize> {
    pub fixed_inv: Vec<Matrix<D>>,
    pub moving_inv: Vec<Matrix<D>>,
    pub fixed_logdet: Vec<f64>,
    pub moving_logdet: Vec<f64>,
    /// Largest eigenvalue of each fixed covariance.
    pub fixed_spread: Vec<f64>,
    /// Largest eigenvalue of each inflated moving covariance.
    pub moving_spread: Vec<f64>,
    pub sigma: f64,
}

struct Inverted<const D: usize> {
    inv: Matrix<D>,
    logdet: f64,
    spread: f64,
}

fn invert_spd<const D: usize>(m: &Matrix<D>, index: usize) -> Result<Inverted<D>> {
    let chol = Cholesky::new(*m).ok_or(Error::NotSpd { index })?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if !logdet.is_finite() {
        return Err(Error::NotSpd { index });
    }
    let inv = chol.inverse();
    Ok(Inverted {
        inv: (inv + inv.transpose()) * 0.5,
        logdet,
        spread: max_eigenvalue(m),
    })
}

impl<const D: usize> EffectiveCovariances<D> {
    pub fn new(
        fixed: &CovPointCloud<D>,
        moving_transformed: &CovPointCloud<D>,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be ≥ 0, got {sigma}")));
        }
        let inflation = Matrix::<D>::identity() * (sigma * sigma);
        let fixed_parts = fixed
            .covariances()
            .par_iter()
            .enumerate()
            .map(|(i, c)| invert_spd(c, i))
            .collect::<Result<Vec<_>>>()?;
        let moving_parts = moving_transformed
            .covariances()
            .par_iter()
            .enumerate()
            .map(|(i, c)| invert_spd(&(c + inflation), i))
            .collect::<Result<Vec<_>>>()?;
        let (fixed_inv, fixed_logdet, fixed_spread) = unzip3(fixed_parts);
        let (moving_inv, moving_logdet, moving_spread) = unzip3(moving_parts);
        Ok(Self {
            fixed_inv,
            moving_inv,
            fixed_logdet,
            moving_logdet,
            fixed_spread,
            moving_spread,
            sigma,
        })
    }

    /// `A_mn = Σ_xn⁻¹ + Σ_ym⁻¹`.
    pub fn inverse_sum(&self, m: usize, n: usize) -> Matrix<D> {
        self.fixed_inv[n] + self.moving_inv[m]
    }
}

fn unzip3<const D: usize>(parts: Vec<Inverted<D>>) -> (Vec<Matrix<D>>, Vec<f64>, Vec<f64>) {
    let mut inv = Vec::with_capacity(parts.len());
    let mut logdet = Vec::with_capacity(parts.len());
    let mut spread = Vec::with_capacity(parts.len());
    for p in parts {
        inv.push(p.inv);
        logdet.push(p.logdet);
        spread.push(p.spread);
    }
    (inv, logdet, spread)
}

/// Dense `M × N` matrix of pair coefficients, row `m` for moving point `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCoefficients {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub sigma_used: f64,
}

impl PairCoefficients {
    pub fn from_rows(rows: usize, cols: usize, values: Vec<f64>, sigma_used: f64) -> Self {
        assert_eq!(values.len(), rows * cols, "coefficient matrix shape");
        Self {
            rows,
            cols,
            values,
            sigma_used,
        }
    }

    /// Number of moving points, `M`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of fixed points, `N`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.values[m * self.cols + n]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.cols..(m + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Fraction of entries that are exactly zero.
    pub fn sparsity(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().filter(|&&v| v == 0.0).count() as f64 / self.values.len() as f64
    }
}

/// E-step: every pair coefficient between `fixed` and the already transformed
/// moving cloud, with moving covariances inflated by `σ²·I`.
///
/// With a finite `cutoff`, pairs farther apart than `cutoff` standard
/// deviations of the broader of their two covariances are set to zero.
/// `cutoff = ∞` evaluates every pair.
pub fn compute_pair_coefficients<const D: usize>(
    fixed: &CovPointCloud<D>,
    moving_transformed: &CovPointCloud<D>,
    sigma: f64,
    cutoff: f64,
) -> Result<PairCoefficients> {
    let eff = EffectiveCovariances::new(fixed, moving_transformed, sigma)?;
    Ok(pair_coefficients_with(fixed, moving_transformed, &eff, cutoff))
}

/// [`compute_pair_coefficients`] with precomputed effective covariances.
pub fn pair_coefficients_with<const D: usize>(
    fixed: &CovPointCloud<D>,
    moving_transformed: &CovPointCloud<D>,
    eff: &EffectiveCovariances<D>,
    cutoff: f64,
) -> PairCoefficients {
    let (m_count, n_count) = (moving_transformed.len(), fixed.len());
    let mut values = vec![0.0; m_count * n_count];
    if n_count > 0 {
        let cutoff2 = cutoff * cutoff;
        values
            .par_chunks_mut(n_count)
            .enumerate()
            .for_each(|(m, row)| {
                let y = &moving_transformed.points()[m];
                for (n, out) in row.iter_mut().enumerate() {
                    let x = &fixed.points()[n];
                    if cutoff.is_finite() {
                        let spread = eff.fixed_spread[n].max(eff.moving_spread[m]);
                        if (y - x).norm_squared() > cutoff2 * spread {
                            continue;
                        }
                    }
                    *out = pair_coefficient(
                        x,
                        &eff.fixed_inv[n],
                        eff.fixed_logdet[n],
                        y,
                        &eff.moving_inv[m],
                        eff.moving_logdet[m],
                    );
                }
            });
    }
    PairCoefficients::from_rows(m_count, n_count, values, eff.sigma)
}

fn check_shapes<const D: usize>(
    coeffs: &PairCoefficients,
    fixed: &CovPointCloud<D>,
    moving: &CovPointCloud<D>,
    frozen: &EffectiveCovariances<D>,
) {
    assert_eq!(coeffs.rows(), moving.len(), "coefficient rows vs moving points");
    assert_eq!(coeffs.cols(), fixed.len(), "coefficient columns vs fixed points");
    assert_eq!(frozen.moving_inv.len(), moving.len());
    assert_eq!(frozen.fixed_inv.len(), fixed.len());
}

/// The objective by direct double summation over all pairs.
pub fn objective<const D: usize>(
    params: &RigidTransform<D>,
    coeffs: &PairCoefficients,
    fixed: &CovPointCloud<D>,
    moving_original: &CovPointCloud<D>,
    frozen: &EffectiveCovariances<D>,
) -> f64 {
    check_shapes(coeffs, fixed, moving_original, frozen);
    let r = params.rotation_matrix();
    let rows: Vec<f64> = (0..coeffs.rows())
        .into_par_iter()
        .map(|m| {
            let y = r * moving_original.points()[m] + params.translation();
            let mut acc = 0.0;
            for (n, &c) in coeffs.row(m).iter().enumerate() {
                if c != 0.0 {
                    let d = y - fixed.points()[n];
                    acc += c * quad(&d, &frozen.inverse_sum(m, n));
                }
            }
            acc
        })
        .collect();
    rows.iter().sum()
}

/// Analytic gradient of [`objective`] in the flat parameter layout
/// `[rotation…, translation…]`.
pub fn objective_gradient<const D: usize>(
    params: &RigidTransform<D>,
    coeffs: &PairCoefficients,
    fixed: &CovPointCloud<D>,
    moving_original: &CovPointCloud<D>,
    frozen: &EffectiveCovariances<D>,
) -> Vec<f64> {
    check_shapes(coeffs, fixed, moving_original, frozen);
    let r = params.rotation_matrix();
    // per row: Σ_n 2·C·A·d, contracted later against the rotation jacobians
    let rows: Vec<Vector<D>> = (0..coeffs.rows())
        .into_par_iter()
        .map(|m| {
            let y = r * moving_original.points()[m] + params.translation();
            let mut g = Vector::<D>::zeros();
            for (n, &c) in coeffs.row(m).iter().enumerate() {
                if c != 0.0 {
                    let d = y - fixed.points()[n];
                    g += frozen.inverse_sum(m, n) * d * (2.0 * c);
                }
            }
            g
        })
        .collect();
    assemble_gradient(params, rows.iter().zip(moving_original.points()))
}

/// Chain rule from per-point residual gradients `g_m = ∂E/∂(R·y_m0 + t)`.
fn assemble_gradient<'a, const D: usize>(
    params: &RigidTransform<D>,
    terms: impl Iterator<Item = (&'a Vector<D>, &'a Vector<D>)>,
) -> Vec<f64> {
    let mut grad_t = Vector::<D>::zeros();
    let mut outer = Matrix::<D>::zeros();
    for (g, y0) in terms {
        grad_t += g;
        outer += g * y0.transpose();
    }
    let mut grad: Vec<f64> = params
        .rotation_jacobians()
        .iter()
        .map(|j| j.component_mul(&outer).sum())
        .collect();
    grad.extend(grad_t.iter());
    grad
}

/// Per-moving-point reduction of the frozen objective.
///
/// For fixed coefficients and inverse sums the contribution of moving point
/// `m` is a quadratic in its transformed position `p`:
/// `Σ_n C·(p − x_n)ᵀA_mn(p − x_n) = (p − μ_m)ᵀW_m(p − μ_m) + k_m`, with
/// `W_m = Σ_n C·A_mn` and `μ_m = W_m⁻¹·Σ_n C·A_mn·x_n`. Evaluating the objective
/// then costs `O(M)` instead of `O(MN)`, and the centered form avoids the
/// cancellation of the expanded polynomial.
#[derive(Debug, Clone)]
pub struct MStepProblem<const D: usize> {
    anchors: Vec<Vector<D>>,
    weights: Vec<Matrix<D>>,
    sources: Vec<Vector<D>>,
    constant: f64,
}

impl<const D: usize> MStepProblem<D> {
    pub fn new(
        coeffs: &PairCoefficients,
        fixed: &CovPointCloud<D>,
        moving_original: &CovPointCloud<D>,
        frozen: &EffectiveCovariances<D>,
    ) -> Self {
        check_shapes(coeffs, fixed, moving_original, frozen);
        let rows: Vec<Option<(Vector<D>, Matrix<D>, Vector<D>, f64)>> = (0..coeffs.rows())
            .into_par_iter()
            .map(|m| {
                let row = coeffs.row(m);
                let mut total = 0.0;
                let mut weight = Matrix::<D>::zeros();
                let mut moment = Vector::<D>::zeros();
                for (n, &c) in row.iter().enumerate() {
                    if c != 0.0 {
                        let a = frozen.fixed_inv[n] * c;
                        weight += a;
                        moment += a * fixed.points()[n];
                        total += c;
                    }
                }
                if total == 0.0 {
                    return None;
                }
                let a_moving = frozen.moving_inv[m] * total;
                weight += a_moving;
                // Σ_n C·Σ_ym⁻¹·x_n = Σ_ym⁻¹·(Σ_n C·x_n)
                let mut weighted_sum = Vector::<D>::zeros();
                for (n, &c) in row.iter().enumerate() {
                    if c != 0.0 {
                        weighted_sum += fixed.points()[n] * c;
                    }
                }
                moment += frozen.moving_inv[m] * weighted_sum;
                // an underflowed weight carries no information; drop the row
                let chol = Cholesky::new(weight)?;
                let anchor = chol.solve(&moment);
                let mut residual = 0.0;
                for (n, &c) in row.iter().enumerate() {
                    if c != 0.0 {
                        let d = anchor - fixed.points()[n];
                        residual += c * quad(&d, &frozen.inverse_sum(m, n));
                    }
                }
                Some((anchor, weight, moving_original.points()[m], residual))
            })
            .collect();
        let mut out = Self {
            anchors: Vec::new(),
            weights: Vec::new(),
            sources: Vec::new(),
            constant: 0.0,
        };
        for (anchor, weight, source, residual) in rows.into_iter().flatten() {
            out.anchors.push(anchor);
            out.weights.push(weight);
            out.sources.push(source);
            out.constant += residual;
        }
        out
    }

    /// Number of moving points that carry weight.
    pub fn active_points(&self) -> usize {
        self.anchors.len()
    }

    pub fn value(&self, params: &RigidTransform<D>) -> f64 {
        let r = params.rotation_matrix();
        let t = params.translation();
        let mut acc = self.constant;
        for ((a, w), y0) in self.anchors.iter().zip(&self.weights).zip(&self.sources) {
            let d = r * y0 + t - a;
            acc += quad(&d, w);
        }
        acc
    }

    pub fn value_and_gradient(&self, params: &RigidTransform<D>) -> (f64, Vec<f64>) {
        let r = params.rotation_matrix();
        let t = params.translation();
        let mut value = self.constant;
        let mut residual_grads = Vec::with_capacity(self.anchors.len());
        for ((a, w), y0) in self.anchors.iter().zip(&self.weights).zip(&self.sources) {
            let d = r * y0 + t - a;
            let wd = w * d;
            value += d.dot(&wd);
            residual_grads.push(wd * 2.0);
        }
        let grad = assemble_gradient(params, residual_grads.iter().zip(&self.sources));
        (value, grad)
    }
}
