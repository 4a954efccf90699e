//! Point-to-point ICP with closed-form rigid fits.

use nalgebra::DMatrix;

use crate::em::{RegistrationReport, Termination};
use crate::error::{Error, Result};
use crate::geometry::{self, CovPointCloud, Matrix, RigidTransform, Vector};
use crate::preprocess;

/// Rigid transform minimizing `Σ‖T·src_i − dst_i‖²` (Kabsch with a
/// determinant guard against reflections).
pub fn kabsch<const D: usize>(src: &[Vector<D>], dst: &[Vector<D>]) -> Result<RigidTransform<D>> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            points: src.len(),
            covariances: dst.len(),
        });
    }
    if src.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = src.len() as f64;
    let src_mean = src.iter().sum::<Vector<D>>() / n;
    let dst_mean = dst.iter().sum::<Vector<D>>() / n;
    let mut h = Matrix::<D>::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - src_mean) * (d - dst_mean).transpose();
    }

    let svd = DMatrix::from_fn(D, D, |i, j| h[(i, j)]).svd(true, true);
    let largest = svd.singular_values.max();
    let rank = if largest > 0.0 {
        svd.singular_values.iter().filter(|&&s| s > 1e-12 * largest).count()
    } else {
        0
    };
    if rank + 1 < D {
        return Err(Error::DegenerateCorrespondences { rank });
    }
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let v = v_t.transpose();
    let mut sign = DMatrix::<f64>::identity(D, D);
    if (&v * u.transpose()).determinant() < 0.0 {
        sign[(D - 1, D - 1)] = -1.0;
    }
    let r_dyn = v * sign * u.transpose();
    let r = geometry::orthonormalize(&Matrix::<D>::from_fn(|i, j| r_dyn[(i, j)]));
    RigidTransform::from_matrix(&r, dst_mean - r * src_mean)
}

/// Classic ICP from `init` (normalized coordinates, like [`crate::em::register`]).
///
/// Stops when the correspondence set repeats, when the relative change of
/// the mean squared residual is below `tol`, or after `max_iters` fits. The
/// energy trace holds the residual after each fit, the sigma trace the mean
/// nearest-neighbor distance before it.
pub fn icp_register<const D: usize>(
    fixed: &CovPointCloud<D>,
    moving: &CovPointCloud<D>,
    init: &RigidTransform<D>,
    max_iters: usize,
    tol: f64,
) -> Result<RegistrationReport<D>> {
    if !(tol >= 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be >= 0, got {tol}")));
    }
    let (fixed_n, moving_n, record) = preprocess::normalize_pair(fixed, moving)?;
    let targets = fixed_n.points();
    let sources = moving_n.points();

    let mut current = *init;
    let mut energy_trace: Vec<f64> = Vec::new();
    let mut sigma_trace = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    while iterations < max_iters {
        let moved: Vec<Vector<D>> = sources.iter().map(|p| current.apply_point(p)).collect();
        let nn = preprocess::nearest_neighbors(&moved, targets);
        let corr: Vec<usize> = nn.iter().map(|&(j, _)| j).collect();
        if previous.as_ref() == Some(&corr) {
            termination = Termination::ParamsConverged;
            break;
        }
        sigma_trace.push(nn.iter().map(|&(_, d)| d).sum::<f64>() / nn.len() as f64);

        let matched: Vec<Vector<D>> = corr.iter().map(|&j| targets[j]).collect();
        current = kabsch(sources, &matched)?;
        let mse = sources
            .iter()
            .zip(&matched)
            .map(|(s, d)| (current.apply_point(s) - d).norm_squared())
            .sum::<f64>()
            / sources.len() as f64;
        iterations += 1;
        previous = Some(corr);

        let last = energy_trace.last().copied();
        energy_trace.push(mse);
        if let Some(prev) = last {
            if (mse - prev).abs() <= tol * prev.max(f64::MIN_POSITIVE) {
                termination = Termination::EnergyConverged;
                break;
            }
        }
    }

    Ok(RegistrationReport {
        transform: current,
        transform_original: preprocess::denormalize_transform(&current, &record),
        normalization: record,
        energy_trace,
        sigma_trace,
        mstep_traces: Vec::new(),
        iterations,
        termination,
    })
}
