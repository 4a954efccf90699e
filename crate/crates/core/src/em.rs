//! The EM registration loop.
//!
//! Each iteration transforms the moving cloud by the current estimate, sets
//! `σ` to the mean nearest-neighbor distance from the moving to the fixed
//! cloud, recomputes the pair coefficients with `σ`-inflated moving
//! covariances, and minimizes the frozen objective over the transform.

use crate::error::{Error, Result};
use crate::geometry::{CovPointCloud, RigidTransform};
use crate::gmm::{self, EffectiveCovariances, MStepProblem, PairCoefficients};
use crate::preprocess::{self, NormalizationRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    pub max_iters: usize,
    /// Relative change of the objective between iterations.
    pub energy_rel_tol: f64,
    /// Euclidean norm of the parameter update between iterations.
    pub param_abs_tol: f64,
    pub sigma_floor: f64,
    /// Pair pruning radius in standard deviations; `f64::INFINITY` disables it.
    pub cutoff: f64,
    pub inner_max_iters: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            energy_rel_tol: 1e-6,
            param_abs_tol: 1e-8,
            sigma_floor: 0.0,
            cutoff: gmm::DEFAULT_CUTOFF,
            inner_max_iters: 50,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if self.max_iters == 0 || self.inner_max_iters == 0 {
            return invalid("iteration limits must be positive");
        }
        if !(self.energy_rel_tol > 0.0 && self.param_abs_tol > 0.0) {
            return invalid("tolerances must be positive");
        }
        if !(self.sigma_floor >= 0.0 && self.sigma_floor.is_finite()) {
            return invalid("sigma floor must be finite and ≥ 0");
        }
        if !(self.cutoff > 0.0) {
            return invalid("cutoff must be positive (or infinite)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Termination {
    EnergyConverged,
    ParamsConverged,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport<const D: usize> {
    /// Estimate between the normalized clouds.
    pub transform: RigidTransform<D>,
    /// Estimate in the input coordinates, mapping moving onto fixed.
    pub transform_original: RigidTransform<D>,
    pub normalization: NormalizationRecord<D>,
    /// Objective after each M-step.
    pub energy_trace: Vec<f64>,
    pub sigma_trace: Vec<f64>,
    /// Accepted objective values inside each M-step, starting value first.
    pub mstep_traces: Vec<Vec<f64>>,
    pub iterations: usize,
    pub termination: Termination,
}

/// One E-step on an already transformed moving cloud: `σ`, the effective
/// covariances, and the pair coefficients.
pub fn e_step<const D: usize>(
    fixed: &CovPointCloud<D>,
    moving_transformed: &CovPointCloud<D>,
    sigma_floor: f64,
    cutoff: f64,
) -> Result<(f64, EffectiveCovariances<D>, PairCoefficients)> {
    let sigma = preprocess::mean_min_distance(moving_transformed, fixed)?.max(sigma_floor);
    let eff = EffectiveCovariances::new(fixed, moving_transformed, sigma)?;
    let coeffs = gmm::pair_coefficients_with(fixed, moving_transformed, &eff, cutoff);
    Ok((sigma, eff, coeffs))
}

/// Normalizes both clouds, runs EM from `init` (given in normalized
/// coordinates), and maps the result back to the input coordinates.
pub fn register<const D: usize>(
    fixed: &CovPointCloud<D>,
    moving: &CovPointCloud<D>,
    init: &RigidTransform<D>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationReport<D>> {
    cfg.validate()?;
    let (fixed_n, moving_n, record) = preprocess::normalize_pair(fixed, moving)?;
    let mut report = register_normalized(&fixed_n, &moving_n, init, cfg)?;
    report.normalization = record;
    report.transform_original = preprocess::denormalize_transform(&report.transform, &record);
    Ok(report)
}

/// The EM loop on clouds that are already normalized. The returned report
/// carries an identity normalization record.
pub fn register_normalized<const D: usize>(
    fixed: &CovPointCloud<D>,
    moving: &CovPointCloud<D>,
    init: &RigidTransform<D>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationReport<D>> {
    cfg.validate()?;
    if fixed.is_empty() || moving.is_empty() {
        return Err(Error::EmptyCloud);
    }
    // surfaces non-SPD input before any iteration runs
    EffectiveCovariances::new(fixed, moving, 0.0)?;

    let mut current = *init;
    let mut energy_trace = Vec::new();
    let mut sigma_trace = Vec::new();
    let mut mstep_traces = Vec::new();
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let moved = current.apply(moving);
        let (sigma, eff, coeffs) = e_step(fixed, &moved, cfg.sigma_floor, cfg.cutoff)?;
        let problem = MStepProblem::new(&coeffs, fixed, moving, &eff);
        let step = minimize_step(|t| problem.value_and_gradient(t), &current, cfg.inner_max_iters);

        let step_norm = current
            .params()
            .iter()
            .zip(step.transform.params())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let energy = *step.trace.last().expect("trace holds the starting value");
        let previous = energy_trace.last().copied();
        current = step.transform;
        sigma_trace.push(sigma);
        energy_trace.push(energy);
        mstep_traces.push(step.trace);

        if step_norm < cfg.param_abs_tol {
            termination = Termination::ParamsConverged;
            break;
        }
        if let Some(prev) = previous {
            if (energy - prev).abs() <= cfg.energy_rel_tol * prev.abs() {
                termination = Termination::EnergyConverged;
                break;
            }
        }
    }

    Ok(RegistrationReport {
        transform: current,
        transform_original: current,
        normalization: NormalizationRecord::identity(),
        energy_trace,
        sigma_trace,
        mstep_traces,
        iterations,
        termination,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome<const D: usize> {
    pub transform: RigidTransform<D>,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// Minimizes `objective` over the transform parameters starting at `start`.
///
/// `objective` returns the value and its gradient in the flat parameter
/// layout. The returned transform never has a larger objective than `start`.
pub fn minimize_step<const D: usize>(
    objective: impl Fn(&RigidTransform<D>) -> (f64, Vec<f64>),
    start: &RigidTransform<D>,
    inner_max_iters: usize,
) -> MStepOutcome<D> {
    let outcome = minimize(
        |p| objective(&RigidTransform::from_params(p)),
        &start.params(),
        inner_max_iters,
    );
    MStepOutcome {
        transform: RigidTransform::from_params(&outcome.params),
        trace: outcome.trace,
    }
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const GRADIENT_TOL: f64 = 1e-10;
/// Length of the very first trial step, along the normalized negative gradient.
const FIRST_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOutcome {
    pub params: Vec<f64>,
    pub value: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// BFGS with Armijo backtracking (step halving).
///
/// Stops when the gradient norm drops below 1e-10, when no step satisfies the
/// Armijo condition, or after `max_iters` accepted steps. A non-finite value
/// at a trial point counts as a failed trial.
pub fn minimize(
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    start: &[f64],
    max_iters: usize,
) -> MinimizeOutcome {
    let n = start.len();
    let mut x = start.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut trace = vec![fx];
    if !fx.is_finite() || !g.iter().all(|v| v.is_finite()) {
        return MinimizeOutcome {
            params: x,
            value: fx,
            trace,
            iterations: 0,
        };
    }
    // inverse Hessian approximation, row-major
    let mut h = vec![0.0; n * n];
    let mut have_curvature = false;
    let mut iterations = 0;

    while iterations < max_iters {
        let gnorm = norm(&g);
        if gnorm < GRADIENT_TOL {
            break;
        }
        let mut dir = if have_curvature {
            mat_vec(&h, &g).into_iter().map(|v| -v).collect()
        } else {
            g.iter().map(|v| -v * FIRST_STEP / gnorm).collect::<Vec<_>>()
        };
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // lost positive definiteness numerically; restart from steepest descent
            have_curvature = false;
            dir = g.iter().map(|v| -v * FIRST_STEP / gnorm).collect();
            slope = dot(&g, &dir);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + alpha * di).collect();
            let (ft, gt) = f(&trial);
            if ft.is_finite() && ft <= fx + ARMIJO_C * alpha * slope && gt.iter().all(|v| v.is_finite()) {
                accepted = Some((trial, ft, gt));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if !have_curvature {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    h[i * n + i] = scale;
                }
                have_curvature = true;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        let stalled = s.iter().zip(&x).all(|(si, xi)| si.abs() <= 1e-15 * (1.0 + xi.abs()));
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        iterations += 1;
        if stalled {
            break;
        }
    }

    MinimizeOutcome {
        params: x,
        value: fx,
        trace,
        iterations,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// `H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ`, `ρ = 1/(yᵀs)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
