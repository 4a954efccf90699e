//! Prealignment, shared-scale normalization and nearest-neighbor statistics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CovPointCloud, RigidTransform, Vector};

/// What [`normalize_pair`] subtracted and divided by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationRecord<const D: usize> {
    pub mean_fixed: Vector<D>,
    pub mean_moving: Vector<D>,
    /// Shared divisor: the RMS radius of the fixed cloud about its centroid.
    pub scale: f64,
}

impl<const D: usize> NormalizationRecord<D> {
    pub fn identity() -> Self {
        Self {
            mean_fixed: Vector::zeros(),
            mean_moving: Vector::zeros(),
            scale: 1.0,
        }
    }

    pub fn normalize_fixed(&self, cloud: &CovPointCloud<D>) -> CovPointCloud<D> {
        self.normalize_about(cloud, &self.mean_fixed)
    }

    pub fn normalize_moving(&self, cloud: &CovPointCloud<D>) -> CovPointCloud<D> {
        self.normalize_about(cloud, &self.mean_moving)
    }

    fn normalize_about(&self, cloud: &CovPointCloud<D>, mean: &Vector<D>) -> CovPointCloud<D> {
        let s2 = self.scale * self.scale;
        let points = cloud.points().iter().map(|p| (p - mean) / self.scale).collect();
        let covariances = cloud.covariances().iter().map(|c| c / s2).collect();
        CovPointCloud::from_parts_unchecked(points, covariances)
    }
}

/// Centers each cloud on its own centroid and divides both by the RMS radius
/// of the fixed cloud. Covariances are divided by the squared scale.
pub fn normalize_pair<const D: usize>(
    fixed: &CovPointCloud<D>,
    moving: &CovPointCloud<D>,
) -> Result<(CovPointCloud<D>, CovPointCloud<D>, NormalizationRecord<D>)> {
    let mean_fixed = fixed.centroid().ok_or(Error::EmptyCloud)?;
    let mean_moving = moving.centroid().ok_or(Error::EmptyCloud)?;
    let mean_sq = fixed
        .points()
        .iter()
        .map(|p| (p - mean_fixed).norm_squared())
        .sum::<f64>()
        / fixed.len() as f64;
    let scale = mean_sq.sqrt();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::ZeroRadius);
    }
    let record = NormalizationRecord {
        mean_fixed,
        mean_moving,
        scale,
    };
    Ok((
        record.normalize_fixed(fixed),
        record.normalize_moving(moving),
        record,
    ))
}

/// Lifts a transform estimated between normalized clouds back to the
/// original coordinates: `p ↦ s·(R·(p − m_moving)/s + t) + m_fixed`.
pub fn denormalize_transform<const D: usize>(
    t_norm: &RigidTransform<D>,
    record: &NormalizationRecord<D>,
) -> RigidTransform<D> {
    let r = t_norm.rotation_matrix();
    let translation =
        t_norm.translation() * record.scale + record.mean_fixed - r * record.mean_moving;
    let mut params = t_norm.params();
    let offset = RigidTransform::<D>::ROTATION_PARAMS;
    params[offset..].copy_from_slice(translation.as_slice());
    RigidTransform::from_params(&params)
}

/// Index and distance of the nearest `targets` point for every query, by
/// exhaustive scan. Ties resolve to the lowest index.
pub fn nearest_neighbors<const D: usize>(
    queries: &[Vector<D>],
    targets: &[Vector<D>],
) -> Vec<(usize, f64)> {
    queries
        .par_iter()
        .map(|q| {
            let mut best = (0usize, f64::INFINITY);
            for (j, x) in targets.iter().enumerate() {
                let d2 = (q - x).norm_squared();
                if d2 < best.1 {
                    best = (j, d2);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

/// `σ = (1/M)·Σ_m min_n ‖y_m − x_n‖`.
pub fn mean_min_distance<const D: usize>(
    moving: &CovPointCloud<D>,
    fixed: &CovPointCloud<D>,
) -> Result<f64> {
    if moving.is_empty() || fixed.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let nn = nearest_neighbors(moving.points(), fixed.points());
    // sequential sum keeps the result independent of the thread schedule
    let total: f64 = nn.iter().map(|&(_, d)| d).sum();
    Ok(total / moving.len() as f64)
}
