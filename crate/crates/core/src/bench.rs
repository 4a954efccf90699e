//! Synthetic registration trials: perturbation of a model into a fixed and
//! a moving cloud, parameter sweeps over both methods, and their summary.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::em::{self, RegistrationConfig};
use crate::error::{Error, Result};
use crate::geometry::{self, CovPointCloud, Matrix, RigidTransform, Vector};
use crate::icp;
use crate::preprocess;

pub const DEFAULT_OUTLIER_COV_FACTOR: f64 = 1e3;
pub const DEFAULT_TRANSLATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Fraction of each cloud removed as one contiguous region.
    pub occlusion_rate: f64,
    pub sample_rate_fixed: f64,
    pub sample_rate_moving: f64,
    /// Upper bound of the per-axis noise std, in units of the model radius.
    pub noise_std_max: f64,
    /// Outliers added to each cloud, as a fraction of the model size.
    pub outlier_rate: f64,
    pub outlier_cov_factor: f64,
    pub init_rotation_deg: f64,
    /// Radius of the ball the ground-truth translation is drawn from, in
    /// units of the model radius.
    pub translation_fraction: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    /// No occlusion, full sampling, no noise, no outliers, identity motion.
    pub fn none(seed: u64) -> Self {
        Self {
            occlusion_rate: 0.0,
            sample_rate_fixed: 1.0,
            sample_rate_moving: 1.0,
            noise_std_max: 0.0,
            outlier_rate: 0.0,
            outlier_cov_factor: DEFAULT_OUTLIER_COV_FACTOR,
            init_rotation_deg: 0.0,
            translation_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidParameter(format!("{what} out of range: {v}")));
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate", self.occlusion_rate);
        }
        for (name, v) in [
            ("sample_rate_fixed", self.sample_rate_fixed),
            ("sample_rate_moving", self.sample_rate_moving),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(name, v);
            }
        }
        for (name, v) in [
            ("noise_std_max", self.noise_std_max),
            ("outlier_rate", self.outlier_rate),
            ("translation_fraction", self.translation_fraction),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, v);
            }
        }
        if !(self.outlier_cov_factor > 0.0 && self.outlier_cov_factor.is_finite()) {
            return bad("outlier_cov_factor", self.outlier_cov_factor);
        }
        if !self.init_rotation_deg.is_finite() {
            return bad("init_rotation_deg", self.init_rotation_deg);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<const D: usize> {
    pub fixed: CovPointCloud<D>,
    pub moving: CovPointCloud<D>,
    /// Motion applied to the moving cloud: `moving = gt(moving_untransformed)`.
    pub gt: RigidTransform<D>,
    pub moving_untransformed: CovPointCloud<D>,
}

impl<const D: usize> Perturbation<D> {
    /// The transform a registration of `moving` onto `fixed` should find.
    pub fn registration_truth(&self) -> RigidTransform<D> {
        self.gt.inverse()
    }
}

/// RMS distance of the points from their centroid.
pub fn rms_radius<const D: usize>(cloud: &CovPointCloud<D>) -> f64 {
    let Some(c) = cloud.centroid() else { return 0.0 };
    let sum: f64 = cloud.points().iter().map(|p| (p - c).norm_squared()).sum();
    (sum / cloud.len() as f64).sqrt()
}

/// True when consecutive points (cyclically) are about as close as nearest
/// neighbors, i.e. the points trace a boundary in order.
pub fn is_ordered_contour<const D: usize>(points: &[Vector<D>]) -> bool {
    let n = points.len();
    if D != 2 || n < 4 {
        return false;
    }
    let step: f64 = (0..n).map(|i| (points[(i + 1) % n] - points[i]).norm()).sum::<f64>() / n as f64;
    let nearest: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / n as f64;
    step <= 2.0 * nearest
}

fn count_of(rate: f64, n: usize) -> usize {
    (rate * n as f64).round() as usize
}

fn occlude<const D: usize>(
    cloud: &CovPointCloud<D>,
    rate: f64,
    contour: bool,
    rng: &mut impl Rng,
) -> CovPointCloud<D> {
    let n = cloud.len();
    let k = count_of(rate, n).min(n);
    if k == 0 {
        return cloud.clone();
    }
    let mut removed = vec![false; n];
    if contour {
        let start = rng.gen_range(0..n);
        for i in 0..k {
            removed[(start + i) % n] = true;
        }
    } else {
        // the ball around a random point that holds exactly k points
        let center = cloud.points()[rng.gen_range(0..n)];
        let mut order: Vec<(f64, usize)> = cloud
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - center).norm_squared(), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &order[..k] {
            removed[i] = true;
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    cloud.select(&keep)
}

fn subsample<const D: usize>(cloud: &CovPointCloud<D>, rate: f64, rng: &mut impl Rng) -> CovPointCloud<D> {
    let n = cloud.len();
    let k = count_of(rate, n).min(n);
    if k == n {
        return cloud.clone();
    }
    let mut keep = index::sample(rng, n, k).into_vec();
    keep.sort_unstable();
    cloud.select(&keep)
}

fn add_noise<const D: usize>(
    cloud: &CovPointCloud<D>,
    std_max: f64,
    rng: &mut impl Rng,
) -> Result<CovPointCloud<D>> {
    if std_max == 0.0 {
        return Ok(cloud.clone());
    }
    let mut points = cloud.points().to_vec();
    let mut covs = cloud.covariances().to_vec();
    for (p, cov) in points.iter_mut().zip(covs.iter_mut()) {
        for axis in 0..D {
            let std = rng.gen_range(0.0..=std_max);
            if std > 0.0 {
                p[axis] += Normal::new(0.0, std).expect("finite std").sample(rng);
            }
            cov[(axis, axis)] += std * std;
        }
    }
    CovPointCloud::new(points, covs)
}

fn add_outliers<const D: usize>(
    cloud: &CovPointCloud<D>,
    count: usize,
    variance: f64,
    rng: &mut impl Rng,
) -> Result<CovPointCloud<D>> {
    if count == 0 {
        return Ok(cloud.clone());
    }
    let mut lo = cloud.points()[0];
    let mut hi = lo;
    for p in cloud.points() {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let mid = (lo + hi) / 2.0;
    let half = (hi - lo) * 0.55;
    let (mut points, mut covs) = cloud.clone().into_parts();
    for _ in 0..count {
        let p = Vector::<D>::from_fn(|i, _| {
            if half[i] > 0.0 {
                rng.gen_range(mid[i] - half[i]..=mid[i] + half[i])
            } else {
                mid[i]
            }
        });
        points.push(p);
        covs.push(Matrix::<D>::identity() * variance);
    }
    CovPointCloud::new(points, covs)
}

fn axis_rotation(axis: usize, angle: f64) -> Matrix3<f64> {
    let mut v = Vector3::zeros();
    v[axis] = angle;
    nalgebra::Rotation3::new(v).into_inner()
}

/// In 2D a rotation by `degrees`. In 3D each of the x, y, z rotations is
/// either zero or `degrees`, chosen at random, composed as `Rz·Ry·Rx`.
fn draw_rotation<const D: usize>(degrees: f64, rng: &mut impl Rng) -> Matrix<D> {
    let angle = degrees.to_radians();
    let r3 = if D == 2 {
        axis_rotation(2, angle)
    } else {
        let mut angles = [0.0; 3];
        for a in angles.iter_mut() {
            if rng.gen_bool(0.5) {
                *a = angle;
            }
        }
        axis_rotation(2, angles[2]) * axis_rotation(1, angles[1]) * axis_rotation(0, angles[0])
    };
    Matrix::<D>::from_fn(|i, j| r3[(i, j)])
}

fn draw_in_ball<const D: usize>(radius: f64, rng: &mut impl Rng) -> Vector<D> {
    if radius == 0.0 {
        return Vector::<D>::zeros();
    }
    loop {
        let v = Vector::<D>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Builds a fixed and a moving cloud from one model. Stages, in order:
/// occlusion, subsampling, noise (variances added to the covariances),
/// outliers, then the ground-truth motion of the moving cloud.
///
/// Everything random is drawn from one generator seeded by `spec.seed`.
pub fn perturb<const D: usize>(model: &CovPointCloud<D>, spec: &PerturbationSpec) -> Result<Perturbation<D>> {
    spec.validate()?;
    if model.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let radius = rms_radius(model);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let contour = spec.occlusion_rate > 0.0 && is_ordered_contour(model.points());

    let fixed = occlude(model, spec.occlusion_rate, contour, &mut rng);
    let moving = occlude(model, spec.occlusion_rate, contour, &mut rng);
    let fixed = subsample(&fixed, spec.sample_rate_fixed, &mut rng);
    let moving = subsample(&moving, spec.sample_rate_moving, &mut rng);
    for cloud in [&fixed, &moving] {
        if cloud.len() < D + 1 {
            return Err(Error::TooFewPoints {
                remaining: cloud.len(),
                required: D + 1,
            });
        }
    }

    let std_max = spec.noise_std_max * radius;
    let fixed = add_noise(&fixed, std_max, &mut rng)?;
    let moving = add_noise(&moving, std_max, &mut rng)?;

    let outliers = count_of(spec.outlier_rate, model.len());
    let variance = spec.outlier_cov_factor * radius * radius;
    let fixed = add_outliers(&fixed, outliers, variance, &mut rng)?;
    let moving_untransformed = add_outliers(&moving, outliers, variance, &mut rng)?;

    let rotation = draw_rotation::<D>(spec.init_rotation_deg, &mut rng);
    let translation = draw_in_ball::<D>(spec.translation_fraction * radius, &mut rng);
    let gt = RigidTransform::from_matrix(&rotation, translation)?;
    Ok(Perturbation {
        fixed,
        moving: gt.apply(&moving_untransformed),
        gt,
        moving_untransformed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    AdaptiveGmm,
    Icp,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::AdaptiveGmm => "agmm",
            Method::Icp => "icp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agmm" => Ok(Method::AdaptiveGmm),
            "icp" => Ok(Method::Icp),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SweepVariable {
    Rotation,
    Noise,
    Outliers,
    Occlusion,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVariable::Rotation => "rotation",
            SweepVariable::Noise => "noise",
            SweepVariable::Outliers => "outliers",
            SweepVariable::Occlusion => "occlusion",
        }
    }

    /// Default grid as `(start, stop, step)`, stop inclusive.
    pub fn default_range(&self) -> (f64, f64, f64) {
        match self {
            SweepVariable::Rotation => (-60.0, 60.0, 8.0),
            SweepVariable::Noise => (0.01, 0.60, 0.06),
            SweepVariable::Outliers => (0.1, 2.0, 0.2),
            SweepVariable::Occlusion => (0.0, 0.3, 0.03),
        }
    }

    pub fn default_grid(&self) -> Vec<f64> {
        let (a, b, s) = self.default_range();
        grid(a, b, s)
    }
}

impl fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(SweepVariable::Rotation),
            "noise" => Ok(SweepVariable::Noise),
            "outliers" => Ok(SweepVariable::Outliers),
            "occlusion" => Ok(SweepVariable::Occlusion),
            other => Err(Error::InvalidParameter(format!("unknown sweep variable {other:?}"))),
        }
    }
}

/// `start, start+step, …` up to `stop` inclusive. Values are computed as
/// `start + i·step` and rounded to 12 decimals so that grids print cleanly.
pub fn grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || stop < start {
        return vec![start];
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=count)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect()
}

/// Upper bounds of the nuisance factors drawn when they are not swept.
/// Rotation is drawn from `[-rotation_deg, rotation_deg]`, the rest from
/// `[0, bound]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceRanges {
    pub rotation_deg: f64,
    pub outlier_rate: f64,
    pub noise_std_max: f64,
    pub occlusion_rate: f64,
}

impl NuisanceRanges {
    pub const PLANAR: Self = Self {
        rotation_deg: 15.0,
        outlier_rate: 0.5,
        noise_std_max: 0.05,
        occlusion_rate: 0.05,
    };
    pub const SPATIAL: Self = Self {
        rotation_deg: 15.0,
        outlier_rate: 0.5,
        noise_std_max: 0.01,
        occlusion_rate: 0.05,
    };

    pub fn for_dim(dim: usize) -> Self {
        if dim == 2 {
            Self::PLANAR
        } else {
            Self::SPATIAL
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSetup {
    pub variable: SweepVariable,
    pub grid: Vec<f64>,
    pub trials_per_value: usize,
    /// Sampling rates, outlier covariance, translation range and the top
    /// level seed. Its swept and nuisance fields are overwritten per trial.
    pub base_spec: PerturbationSpec,
    pub ranges: NuisanceRanges,
    pub methods: Vec<Method>,
    pub registration: RegistrationConfig,
    pub icp: IcpConfig,
}

impl SweepSetup {
    pub fn new(variable: SweepVariable, dim: usize, seed: u64) -> Self {
        Self {
            variable,
            grid: variable.default_grid(),
            trials_per_value: 6,
            base_spec: PerturbationSpec {
                sample_rate_fixed: 0.9,
                sample_rate_moving: 0.85,
                translation_fraction: DEFAULT_TRANSLATION_FRACTION,
                ..PerturbationSpec::none(seed)
            },
            ranges: NuisanceRanges::for_dim(dim),
            methods: vec![Method::AdaptiveGmm, Method::Icp],
            registration: RegistrationConfig::default(),
            icp: IcpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub method: Method,
    pub variable: SweepVariable,
    pub value: f64,
    pub trial: usize,
    /// Seed of the trial's own generator.
    pub seed: u64,
    pub rotation_error: f64,
    /// Translation error divided by the model radius.
    pub translation_error: f64,
    pub wall_time: f64,
    /// Set when the method returned an error; the errors then describe the
    /// untouched initial transform.
    pub failed: bool,
    pub spec: PerturbationSpec,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of trial `trial` at grid position `grid_index`.
pub fn trial_seed(top: u64, grid_index: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(top) ^ grid_index as u64) ^ trial as u64)
}

/// Runs every method on one perturbation, from the identity in normalized
/// coordinates. Returns `(method, rotation_error, translation_error, wall_time, failed)`.
pub fn evaluate_methods<const D: usize>(
    pair: &Perturbation<D>,
    methods: &[Method],
    registration: &RegistrationConfig,
    icp_cfg: &IcpConfig,
    radius: f64,
) -> Result<Vec<(Method, f64, f64, f64, bool)>> {
    let truth = pair.registration_truth();
    let init = RigidTransform::<D>::identity();
    methods
        .iter()
        .map(|&method| {
            let start = Instant::now();
            let outcome = match method {
                Method::AdaptiveGmm => em::register(&pair.fixed, &pair.moving, &init, registration),
                Method::Icp => icp::icp_register(&pair.fixed, &pair.moving, &init, icp_cfg.max_iters, icp_cfg.tol),
            };
            let wall_time = start.elapsed().as_secs_f64();
            let (estimate, failed) = match outcome {
                Ok(report) => (report.transform_original, false),
                Err(Error::InvalidParameter(msg)) => return Err(Error::InvalidParameter(msg)),
                Err(_) => {
                    let (_, _, record) = preprocess::normalize_pair(&pair.fixed, &pair.moving)?;
                    (preprocess::denormalize_transform(&init, &record), true)
                }
            };
            let (rot, trans) = transform_errors(&truth, &estimate, radius)?;
            Ok((method, rot, trans, wall_time, failed))
        })
        .collect()
}

/// Rotation error on orthonormalized matrices and translation error in
/// units of `radius`.
pub fn transform_errors<const D: usize>(
    truth: &RigidTransform<D>,
    estimate: &RigidTransform<D>,
    radius: f64,
) -> Result<(f64, f64)> {
    let rot = geometry::rotation_error(
        &geometry::orthonormalize(&truth.rotation_matrix()),
        &geometry::orthonormalize(&estimate.rotation_matrix()),
    )?;
    let trans = (truth.translation() - estimate.translation()).norm() / radius;
    Ok((rot, trans))
}

fn trial_spec(setup: &SweepSetup, value: f64, rng: &mut impl Rng) -> PerturbationSpec {
    let r = &setup.ranges;
    let mut spec = setup.base_spec;
    spec.init_rotation_deg = rng.gen_range(-r.rotation_deg..=r.rotation_deg);
    spec.outlier_rate = rng.gen_range(0.0..=r.outlier_rate);
    spec.noise_std_max = rng.gen_range(0.0..=r.noise_std_max);
    spec.occlusion_rate = rng.gen_range(0.0..=r.occlusion_rate);
    match setup.variable {
        SweepVariable::Rotation => spec.init_rotation_deg = value,
        SweepVariable::Noise => spec.noise_std_max = value,
        SweepVariable::Outliers => spec.outlier_rate = value,
        SweepVariable::Occlusion => spec.occlusion_rate = value,
    }
    spec.seed = rng.gen();
    spec
}

/// The perturbed pair, its spec, the trial seed and the model radius of one
/// sweep trial, exactly as [`run_sweep`] draws them.
pub fn trial_perturbation<const D: usize>(
    dataset: &[CovPointCloud<D>],
    setup: &SweepSetup,
    grid_index: usize,
    trial: usize,
) -> Result<(Perturbation<D>, PerturbationSpec, u64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let value = *setup
        .grid
        .get(grid_index)
        .ok_or_else(|| Error::InvalidParameter(format!("grid index {grid_index} out of range")))?;
    let seed = trial_seed(setup.base_spec.seed, grid_index, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = trial_spec(setup, value, &mut rng);
    let model = &dataset[rng.gen_range(0..dataset.len())];
    let pair = perturb(model, &spec)?;
    Ok((pair, spec, seed, rms_radius(model)))
}

fn run_trial<const D: usize>(
    dataset: &[CovPointCloud<D>],
    setup: &SweepSetup,
    grid_index: usize,
    trial: usize,
) -> Result<Vec<TrialResult>> {
    let value = setup.grid[grid_index];
    let (pair, spec, seed, radius) = trial_perturbation(dataset, setup, grid_index, trial)?;
    let outcomes = evaluate_methods(&pair, &setup.methods, &setup.registration, &setup.icp, radius)?;
    Ok(outcomes
        .into_iter()
        .map(|(method, rotation_error, translation_error, wall_time, failed)| TrialResult {
            method,
            variable: setup.variable,
            value,
            trial,
            seed,
            rotation_error,
            translation_error,
            wall_time,
            failed,
            spec,
        })
        .collect())
}

/// Every grid value × trial × method, ordered by grid position, then trial,
/// then the order of `setup.methods`. Trials run in parallel; each owns a
/// generator seeded from `(base_spec.seed, grid index, trial index)`, so the
/// results do not depend on the schedule.
pub fn run_sweep<const D: usize>(dataset: &[CovPointCloud<D>], setup: &SweepSetup) -> Result<Vec<TrialResult>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if setup.grid.is_empty() || setup.trials_per_value == 0 || setup.methods.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs a grid value, a trial and a method".into(),
        ));
    }
    if let Some(v) = setup.grid.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("grid value {v} is not finite")));
    }
    setup.registration.validate()?;
    let jobs: Vec<(usize, usize)> = (0..setup.grid.len())
        .flat_map(|g| (0..setup.trials_per_value).map(move |t| (g, t)))
        .collect();
    let per_job: Vec<Vec<TrialResult>> = jobs
        .par_iter()
        .map(|&(g, t)| run_trial(dataset, setup, g, t))
        .collect::<Result<_>>()?;
    Ok(per_job.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub value: f64,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and standard deviation of the rotation error per grid value and
/// method, ordered by value then method name.
pub fn summarize(results: &[TrialResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(OrderedValue, &'static str), (Method, Vec<f64>)> = BTreeMap::new();
    for r in results {
        groups
            .entry((OrderedValue(r.value), r.method.name()))
            .or_insert_with(|| (r.method, Vec::new()))
            .1
            .push(r.rotation_error);
    }
    groups
        .into_iter()
        .map(|((value, _), (method, errors))| {
            let n = errors.len() as f64;
            let mean = errors.iter().sum::<f64>() / n;
            let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                method,
                value: value.0,
                count: errors.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct OrderedValue(f64);

impl PartialEq for OrderedValue {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0).is_eq()
    }
}

impl Eq for OrderedValue {}

impl PartialOrd for OrderedValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;
    use proptest::prelude::*;

    fn model() -> CovPointCloud<2> {
        CovPointCloud::isotropic(shapes::fish(100), 1e-4).unwrap()
    }

    fn shuffled_model() -> CovPointCloud<2> {
        let m = model();
        let order: Vec<usize> = (0..100).map(|i| (i * 37) % 100).collect();
        m.select(&order)
    }

    #[test]
    fn zero_spec_is_identity() {
        let m = model();
        let p = perturb(&m, &PerturbationSpec::none(5)).unwrap();
        assert_eq!(p.fixed, m);
        assert_eq!(p.moving, m);
        assert_eq!(p.gt, RigidTransform::identity());
    }

    #[test]
    fn outliers_counted_against_model_size() {
        let spec = PerturbationSpec {
            outlier_rate: 0.5,
            ..PerturbationSpec::none(1)
        };
        let p = perturb(&model(), &spec).unwrap();
        assert_eq!(p.moving.len(), 150);
        assert_eq!(p.fixed.len(), 150);
        let variance = DEFAULT_OUTLIER_COV_FACTOR * rms_radius(&model()).powi(2);
        for cov in &p.moving.covariances()[100..] {
            assert_relative_eq!(*cov, Matrix::<2>::identity() * variance);
        }
    }

    #[test]
    fn outliers_stay_in_inflated_box() {
        let spec = PerturbationSpec {
            outlier_rate: 2.0,
            ..PerturbationSpec::none(9)
        };
        let m = model();
        let p = perturb(&m, &spec).unwrap();
        let (mut lo, mut hi) = (m.points()[0], m.points()[0]);
        for q in m.points() {
            lo = lo.inf(q);
            hi = hi.sup(q);
        }
        let pad = (hi - lo) * 0.05 + Vector2::repeat(1e-12);
        for q in &p.fixed.points()[100..] {
            assert!(q.iter().zip((lo - pad).iter()).all(|(a, b)| a >= b));
            assert!(q.iter().zip((hi + pad).iter()).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn sampling_keeps_rounded_count() {
        let spec = PerturbationSpec {
            sample_rate_fixed: 0.9,
            sample_rate_moving: 0.85,
            ..PerturbationSpec::none(2)
        };
        let p = perturb(&model(), &spec).unwrap();
        assert_eq!(p.fixed.len(), 90);
        assert_eq!(p.moving.len(), 85);
    }

    #[test]
    fn contour_occlusion_removes_a_run() {
        let m = model();
        assert!(is_ordered_contour(m.points()));
        let spec = PerturbationSpec {
            occlusion_rate: 0.2,
            ..PerturbationSpec::none(3)
        };
        let p = perturb(&m, &spec).unwrap();
        assert_eq!(p.fixed.len(), 80);
        let kept: Vec<usize> = p
            .fixed
            .points()
            .iter()
            .map(|q| m.points().iter().position(|r| r == q).unwrap())
            .collect();
        let gaps = (0..kept.len())
            .filter(|&i| (kept[(i + 1) % kept.len()] + 100 - kept[i]) % 100 != 1)
            .count();
        assert_eq!(gaps, 1);
    }

    #[test]
    fn unordered_occlusion_removes_a_ball() {
        let m = shuffled_model();
        assert!(!is_ordered_contour(m.points()));
        let spec = PerturbationSpec {
            occlusion_rate: 0.3,
            ..PerturbationSpec::none(4)
        };
        let p = perturb(&m, &spec).unwrap();
        assert_eq!(p.fixed.len(), 70);
        let kept = p.fixed.points();
        let is_ball = |center: &Vector<2>| {
            let mut order: Vec<(f64, usize)> = m
                .points()
                .iter()
                .enumerate()
                .map(|(i, q)| ((q - center).norm_squared(), i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order[..30].iter().all(|&(_, i)| !kept.contains(&m.points()[i]))
        };
        assert!(m.points().iter().any(is_ball));
    }

    #[test]
    fn too_few_points_error() {
        let m = CovPointCloud::isotropic(shapes::fish(5), 1e-4).unwrap();
        let spec = PerturbationSpec {
            occlusion_rate: 0.6,
            ..PerturbationSpec::none(0)
        };
        assert_eq!(
            perturb(&m, &spec),
            Err(Error::TooFewPoints { remaining: 2, required: 3 })
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let m = model();
        for spec in [
            PerturbationSpec { occlusion_rate: 1.5, ..PerturbationSpec::none(0) },
            PerturbationSpec { sample_rate_moving: 0.0, ..PerturbationSpec::none(0) },
            PerturbationSpec { noise_std_max: -0.1, ..PerturbationSpec::none(0) },
            PerturbationSpec { outlier_cov_factor: 0.0, ..PerturbationSpec::none(0) },
        ] {
            assert!(matches!(perturb(&m, &spec), Err(Error::InvalidParameter(_))));
        }
        let empty = CovPointCloud::<2>::new(vec![], vec![]).unwrap();
        assert_eq!(perturb(&empty, &PerturbationSpec::none(0)), Err(Error::EmptyCloud));
    }

    #[test]
    fn noise_variances_recorded() {
        let spec = PerturbationSpec {
            noise_std_max: 0.05,
            ..PerturbationSpec::none(11)
        };
        let m = model();
        let radius = rms_radius(&m);
        let p = perturb(&m, &spec).unwrap();
        let mut moved = 0;
        for (i, cov) in p.fixed.covariances().iter().enumerate() {
            assert_eq!(cov[(0, 1)], 0.0);
            for axis in 0..2 {
                let extra = cov[(axis, axis)] - 1e-4;
                assert!(extra >= 0.0 && extra <= (0.05 * radius).powi(2) + 1e-15);
            }
            if p.fixed.points()[i] != m.points()[i] {
                moved += 1;
            }
        }
        assert!(moved > 90);
    }

    #[test]
    fn gt_matches_requested_rotation() {
        let spec = PerturbationSpec {
            init_rotation_deg: 30.0,
            translation_fraction: 0.1,
            ..PerturbationSpec::none(6)
        };
        let m = model();
        let p = perturb(&m, &spec).unwrap();
        assert_relative_eq!(p.gt.angle(), 30f64.to_radians(), epsilon = 1e-12);
        assert!(p.gt.translation().norm() <= 0.1 * rms_radius(&m));
        assert_eq!(p.moving, p.gt.apply(&p.moving_untransformed));
    }

    #[test]
    fn spatial_rotation_uses_zero_or_angle_per_axis() {
        let m = CovPointCloud::isotropic(
            shapes::blob_surface(200, &mut ChaCha8Rng::seed_from_u64(0)),
            1e-4,
        )
        .unwrap();
        let angle = 40f64.to_radians();
        let allowed: Vec<Matrix3<f64>> = (0..8)
            .map(|mask: u32| {
                let a = |bit: u32| if mask & (1 << bit) != 0 { angle } else { 0.0 };
                axis_rotation(2, a(2)) * axis_rotation(1, a(1)) * axis_rotation(0, a(0))
            })
            .collect();
        for seed in 0..10 {
            let spec = PerturbationSpec {
                init_rotation_deg: 40.0,
                ..PerturbationSpec::none(seed)
            };
            let r = perturb(&m, &spec).unwrap().gt.rotation_matrix();
            assert!(allowed.iter().any(|a| (a - r).norm() < 1e-12));
        }
    }

    #[test]
    fn perturb_is_reproducible() {
        let spec = PerturbationSpec {
            occlusion_rate: 0.05,
            sample_rate_fixed: 0.9,
            sample_rate_moving: 0.85,
            noise_std_max: 0.03,
            outlier_rate: 0.3,
            init_rotation_deg: -12.0,
            translation_fraction: 0.1,
            ..PerturbationSpec::none(77)
        };
        let a = perturb(&model(), &spec).unwrap();
        let b = perturb(&model(), &spec).unwrap();
        assert_eq!(a, b);
        let c = perturb(&model(), &PerturbationSpec { seed: 78, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn grids_match_defaults() {
        let rot = SweepVariable::Rotation.default_grid();
        assert_eq!(rot.len(), 16);
        assert_eq!(rot[0], -60.0);
        assert_eq!(rot[15], 60.0);
        let noise = SweepVariable::Noise.default_grid();
        assert_eq!(noise.first(), Some(&0.01));
        assert_eq!(noise.last(), Some(&0.55));
        assert_eq!(noise.len(), 10);
        let occ = SweepVariable::Occlusion.default_grid();
        assert_eq!(occ.len(), 11);
        assert_eq!(occ[4], 0.12);
        assert_eq!(occ[10], 0.3);
        assert_eq!(grid(0.0, 0.0, 1.0), vec![0.0]);
    }

    #[test]
    fn names_round_trip() {
        for v in [
            SweepVariable::Rotation,
            SweepVariable::Noise,
            SweepVariable::Outliers,
            SweepVariable::Occlusion,
        ] {
            assert_eq!(v.name().parse::<SweepVariable>().unwrap(), v);
        }
        for m in [Method::AdaptiveGmm, Method::Icp] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("scale".parse::<SweepVariable>().is_err());
    }

    fn small_setup() -> SweepSetup {
        SweepSetup {
            grid: vec![-10.0, 10.0],
            trials_per_value: 2,
            ..SweepSetup::new(SweepVariable::Rotation, 2, 42)
        }
    }

    #[test]
    fn sweep_shape_and_determinism() {
        let data = shapes::contour_dataset(3, 60, 1e-4, 1).unwrap();
        let setup = small_setup();
        let a = run_sweep(&data, &setup).unwrap();
        assert_eq!(a.len(), 2 * 2 * 2);
        assert_eq!(a[0].method, Method::AdaptiveGmm);
        assert_eq!(a[1].method, Method::Icp);
        assert_eq!(a[0].spec.init_rotation_deg, -10.0);
        assert_eq!(a[7].value, 10.0);
        assert!(a.iter().all(|r| r.rotation_error >= 0.0 && !r.failed));
        let b = run_sweep(&data, &setup).unwrap();
        let strip = |v: &[TrialResult]| -> Vec<(f64, f64, u64)> {
            v.iter().map(|r| (r.rotation_error, r.translation_error, r.seed)).collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn sweep_serial_matches_parallel() {
        let data = shapes::contour_dataset(2, 50, 1e-4, 2).unwrap();
        let setup = small_setup();
        let parallel = run_sweep(&data, &setup).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| run_sweep(&data, &setup)).unwrap();
        for (p, s) in parallel.iter().zip(&serial) {
            assert_eq!(p.rotation_error, s.rotation_error);
            assert_eq!(p.spec, s.spec);
        }
    }

    #[test]
    fn sweep_rejects_bad_input() {
        let setup = small_setup();
        assert_eq!(run_sweep::<2>(&[], &setup), Err(Error::EmptyDataset));
        let data = shapes::contour_dataset(1, 40, 1e-4, 0).unwrap();
        let empty_grid = SweepSetup { grid: vec![], ..small_setup() };
        assert!(run_sweep(&data, &empty_grid).is_err());
        let no_trials = SweepSetup { trials_per_value: 0, ..small_setup() };
        assert!(run_sweep(&data, &no_trials).is_err());
    }

    #[test]
    fn trial_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..20)
            .flat_map(|g| (0..20).map(move |t| trial_seed(1, g, t)))
            .collect();
        assert_eq!(seeds.len(), 400);
    }

    fn result(method: Method, value: f64, err: f64) -> TrialResult {
        TrialResult {
            method,
            variable: SweepVariable::Rotation,
            value,
            trial: 0,
            seed: 0,
            rotation_error: err,
            translation_error: 0.0,
            wall_time: 0.0,
            failed: false,
            spec: PerturbationSpec::none(0),
        }
    }

    #[test]
    fn summarize_single_and_pair() {
        let one = summarize(&[result(Method::Icp, 0.0, 0.25)]);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].mean, 0.25);
        assert_eq!(one[0].std, 0.0);
        let two = summarize(&[result(Method::Icp, 0.0, 0.1), result(Method::Icp, 0.0, 0.3)]);
        assert_relative_eq!(two[0].mean, 0.2, epsilon = 1e-15);
        assert_relative_eq!(two[0].std, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn summarize_orders_by_value_then_name() {
        let rows = summarize(&[
            result(Method::Icp, 5.0, 0.1),
            result(Method::AdaptiveGmm, 5.0, 0.1),
            result(Method::Icp, -5.0, 0.1),
        ]);
        let keys: Vec<(f64, Method)> = rows.iter().map(|r| (r.value, r.method)).collect();
        assert_eq!(
            keys,
            vec![(-5.0, Method::Icp), (5.0, Method::AdaptiveGmm), (5.0, Method::Icp)]
        );
    }

    proptest! {
        #[test]
        fn summarize_partitions(entries in proptest::collection::vec((0u8..3, 0u8..2, 0.0..1.0f64), 1..40)) {
            let results: Vec<TrialResult> = entries
                .iter()
                .map(|&(v, m, e)| result(if m == 0 { Method::AdaptiveGmm } else { Method::Icp }, v as f64, e))
                .collect();
            let rows = summarize(&results);
            prop_assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), results.len());
            for r in &rows {
                prop_assert!(r.std >= 0.0);
            }
        }

        #[test]
        fn perturb_gt_reproduces_moving(seed in any::<u64>(), deg in -180.0..180.0f64, noise in 0.0..0.1f64) {
            let spec = PerturbationSpec {
                noise_std_max: noise,
                init_rotation_deg: deg,
                translation_fraction: 0.1,
                sample_rate_moving: 0.8,
                ..PerturbationSpec::none(seed)
            };
            let p = perturb(&model(), &spec).unwrap();
            prop_assert_eq!(p.gt.apply(&p.moving_untransformed), p.moving);
        }
    }
}
