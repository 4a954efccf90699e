//! Small generated models for benchmarks and tests.
//!
//! Contours are resampled at equal arc length and listed in boundary order,
//! which the occlusion model relies on.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{CovPointCloud, Vector};

pub const DEFAULT_MODEL_VARIANCE: f64 = 1e-4;

/// Closed planar curve `r(φ) = 1 + Σ a_k·cos(k·φ + p_k)`, stretched by
/// `aspect` along x, resampled to `n` points at equal arc length.
pub fn harmonic_contour(n: usize, harmonics: &[(u32, f64, f64)], aspect: f64) -> Vec<Vector<2>> {
    let dense = 4096;
    let curve: Vec<Vector<2>> = (0..dense)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / dense as f64;
            let r = 1.0
                + harmonics
                    .iter()
                    .map(|&(k, a, p)| a * (k as f64 * phi + p).cos())
                    .sum::<f64>();
            Vector2::new(aspect * r * phi.cos(), r * phi.sin())
        })
        .collect();
    resample_closed(&curve, n)
}

/// Equal arc-length resampling of a closed polyline.
fn resample_closed(curve: &[Vector<2>], n: usize) -> Vec<Vector<2>> {
    let m = curve.len();
    let mut cumulative = Vec::with_capacity(m + 1);
    cumulative.push(0.0);
    for i in 0..m {
        let seg = (curve[(i + 1) % m] - curve[i]).norm();
        cumulative.push(cumulative[i] + seg);
    }
    let total = cumulative[m];
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for j in 0..n {
        let s = total * j as f64 / n as f64;
        while cumulative[seg + 1] < s {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 { (s - cumulative[seg]) / len } else { 0.0 };
        out.push(curve[seg] + (curve[(seg + 1) % m] - curve[seg]) * t);
    }
    out
}

/// An asymmetric fish-like outline.
pub fn fish(n: usize) -> Vec<Vector<2>> {
    harmonic_contour(n, &[(2, 0.18, 0.4), (3, 0.22, 0.0), (5, 0.06, 1.3)], 1.6)
}

pub fn ellipse(n: usize) -> Vec<Vector<2>> {
    harmonic_contour(n, &[], 1.7)
}

/// Rectangle outline with a rounded bump on its top edge.
pub fn box_with_bump(n: usize) -> Vec<Vector<2>> {
    let mut curve = Vec::new();
    let steps = 400;
    let corners = [(-1.5, -0.8), (1.5, -0.8), (1.5, 0.8), (-1.5, 0.8)];
    for c in 0..4 {
        let (x0, y0) = corners[c];
        let (x1, y1) = corners[(c + 1) % 4];
        for i in 0..steps {
            let t = i as f64 / steps as f64;
            let x = x0 + (x1 - x0) * t;
            let mut y = y0 + (y1 - y0) * t;
            if c == 2 && x > 0.2 && x < 1.0 {
                y += 0.4 * (PI * (x - 0.2) / 0.8).sin();
            }
            curve.push(Vector2::new(x, y));
        }
    }
    resample_closed(&curve, n)
}

/// Random smooth contour; the shape family used for generated 2D datasets.
pub fn random_contour(n: usize, rng: &mut impl Rng) -> Vec<Vector<2>> {
    let harmonics: Vec<(u32, f64, f64)> = (2..=5)
        .map(|k| (k, rng.gen_range(0.0..0.25 / k as f64 * 2.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let aspect = rng.gen_range(1.0..1.8);
    harmonic_contour(n, &harmonics, aspect)
}

/// Points on a lumpy closed surface, spread by a Fibonacci lattice.
pub fn blob_surface(n: usize, rng: &mut impl Rng) -> Vec<Vector<3>> {
    let lumps: Vec<(Vector3<f64>, f64)> = (0..4)
        .map(|_| {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            (dir, rng.gen_range(0.1..0.35))
        })
        .collect();
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let ring = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let dir = Vector3::new(ring * phi.cos(), ring * phi.sin(), z);
            let r = 1.0
                + lumps
                    .iter()
                    .map(|(c, a)| a * (4.0 * (dir.dot(c) - 1.0)).exp())
                    .sum::<f64>();
            Vector3::new(1.3 * r * dir.x, r * dir.y, 0.8 * r * dir.z)
        })
        .collect()
}

/// `count` random contours of `points` points each, with covariance `variance·I`.
pub fn contour_dataset(count: usize, points: usize, variance: f64, seed: u64) -> Result<Vec<CovPointCloud<2>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| CovPointCloud::isotropic(random_contour(points, &mut rng), variance))
        .collect()
}

pub fn blob_dataset(count: usize, points: usize, variance: f64, seed: u64) -> Result<Vec<CovPointCloud<3>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| CovPointCloud::isotropic(blob_surface(points, &mut rng), variance))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spacing(points: &[Vector<2>]) -> (f64, f64) {
        let n = points.len();
        let d: Vec<f64> = (0..n).map(|i| (points[(i + 1) % n] - points[i]).norm()).collect();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        let max = d.iter().copied().fold(0.0, f64::max);
        (min, max)
    }

    #[test]
    fn contours_are_evenly_spaced() {
        for shape in [fish(100), ellipse(100), box_with_bump(100)] {
            assert_eq!(shape.len(), 100);
            let (min, max) = spacing(&shape);
            assert!(max / min < 1.5, "{min} {max}");
        }
    }

    #[test]
    fn datasets_are_reproducible() {
        assert_eq!(contour_dataset(3, 50, DEFAULT_MODEL_VARIANCE, 7).unwrap(), contour_dataset(3, 50, DEFAULT_MODEL_VARIANCE, 7).unwrap());
        assert_ne!(contour_dataset(1, 50, DEFAULT_MODEL_VARIANCE, 7).unwrap(), contour_dataset(1, 50, DEFAULT_MODEL_VARIANCE, 8).unwrap());
        let blobs = blob_dataset(2, 300, DEFAULT_MODEL_VARIANCE, 1).unwrap();
        assert_eq!(blobs[1].len(), 300);
    }
}
