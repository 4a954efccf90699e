//! The `agmm` subcommands. Each returns the text to print on success and
//! writes its files only after all computation has finished.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use agmm_core::bench::{
    self, Method, PerturbationSpec, SweepSetup, SweepVariable, TrialResult,
    DEFAULT_OUTLIER_COV_FACTOR, DEFAULT_TRANSLATION_FRACTION,
};
use agmm_core::em::{self, RegistrationReport};
use agmm_core::geometry::rotation_error;
use agmm_core::shapes;
use agmm_core::{CovPointCloud, RigidTransform};
use clap::{Args, ValueEnum};

use crate::config::{RunConfig, DEFAULT_VARIANCE};
use crate::error::{CliError, CliResult};
use crate::io::{self, fmt_num, AnyCloud, AnyTransform};
use crate::plot;

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub dim: u8,
    /// key = value file; flags given here override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative energy change that ends the iteration.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub sigma_floor: Option<f64>,
    /// Pair pruning radius in standard deviations, or `inf`.
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long)]
    pub default_variance: Option<f64>,
    #[arg(long)]
    pub out_transform: Option<PathBuf>,
    #[arg(long)]
    pub out_report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub occlusion: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sample_fixed: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sample_moving: f64,
    /// Largest per-axis noise std, in units of the model radius.
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f64,
    /// Outliers per cloud as a fraction of the model size.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub rotation_deg: f64,
    /// Radius of the random translation, in units of the model radius.
    #[arg(long, default_value_t = DEFAULT_TRANSLATION_FRACTION)]
    pub translation: f64,
    #[arg(long, default_value_t = DEFAULT_OUTLIER_COV_FACTOR)]
    pub outlier_cov_factor: f64,
    #[arg(long, default_value_t = DEFAULT_VARIANCE)]
    pub default_variance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes `<prefix>_fixed.csv`, `<prefix>_moving.csv` and `<prefix>_gt.json`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Directory of `.csv` / `.ply` models, all of one dimension.
    #[arg(long)]
    pub dataset: PathBuf,
    /// rotation, noise, outliers or occlusion.
    #[arg(long)]
    pub variable: String,
    /// `start:stop:step` (stop inclusive) or a comma-separated list.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 6)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "agmm,icp")]
    pub methods: String,
    #[arg(long, default_value_t = 0.9)]
    pub sample_fixed: f64,
    #[arg(long, default_value_t = 0.85)]
    pub sample_moving: f64,
    #[arg(long, default_value_t = DEFAULT_TRANSLATION_FRACTION)]
    pub translation: f64,
    #[arg(long, default_value_t = DEFAULT_OUTLIER_COV_FACTOR)]
    pub outlier_cov_factor: f64,
    #[arg(long, default_value_t = DEFAULT_VARIANCE)]
    pub default_variance: f64,
    /// Record measured run times; without it the column is 0 so reruns are
    /// byte-identical.
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub out_csv: PathBuf,
    #[arg(long)]
    pub out_svg: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub est: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeChoice {
    /// Random smooth contours (2D).
    Random,
    Fish,
    Ellipse,
    Box,
    /// Random lumpy surfaces (3D).
    Blob,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value_t = ShapeChoice::Random)]
    pub shape: ShapeChoice,
    /// Number of models for the random families.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = DEFAULT_VARIANCE)]
    pub variance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn finite_transform<const D: usize>(t: &RigidTransform<D>) -> CliResult<()> {
    if t.params().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::numerical("registration produced a non-finite transform"))
    }
}

fn report_csv<const D: usize>(report: &RegistrationReport<D>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# termination={:?} iterations={}",
        report.termination, report.iterations
    );
    out.push_str("iteration,sigma,energy,mstep_start,mstep_end,mstep_steps\n");
    for i in 0..report.energy_trace.len() {
        let trace = report.mstep_traces.get(i);
        let first = trace.and_then(|t| t.first()).copied().unwrap_or(f64::NAN);
        let last = trace.and_then(|t| t.last()).copied().unwrap_or(f64::NAN);
        let steps = trace.map_or(0, |t| t.len().saturating_sub(1));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            i + 1,
            fmt_num(report.sigma_trace[i]),
            fmt_num(report.energy_trace[i]),
            fmt_num(first),
            fmt_num(last),
            steps
        );
    }
    out
}

fn register_dim<const D: usize>(
    fixed: &CovPointCloud<D>,
    moving: &CovPointCloud<D>,
    cfg: &RunConfig,
) -> CliResult<(RegistrationReport<D>, String)> {
    let report = em::register(fixed, moving, &RigidTransform::identity(), &cfg.registration)?;
    finite_transform(&report.transform_original)?;
    let json = io::transform_to_json(&report.transform_original);
    Ok((report, json))
}

pub fn register(args: &RegisterArgs) -> CliResult<String> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| e.context(path.display()))?
        }
        None => RunConfig::default(),
    };
    let r = &mut cfg.registration;
    if let Some(v) = args.max_iters {
        r.max_iters = v;
    }
    if let Some(v) = args.tol {
        r.energy_rel_tol = v;
    }
    if let Some(v) = args.sigma_floor {
        r.sigma_floor = v;
    }
    if let Some(v) = args.cutoff {
        r.cutoff = v;
    }
    if let Some(v) = args.default_variance {
        cfg.default_variance = v;
    }
    if args.out_transform.is_some() {
        cfg.out_transform = args.out_transform.clone();
    }
    if args.out_report.is_some() {
        cfg.out_report = args.out_report.clone();
    }
    cfg.validate()?;
    let out_transform = cfg
        .out_transform
        .clone()
        .ok_or_else(|| CliError::usage("--out-transform is required"))?;
    let out_report = cfg
        .out_report
        .clone()
        .ok_or_else(|| CliError::usage("--out-report is required"))?;

    let fixed = io::read_cloud(&args.fixed, cfg.default_variance)?;
    let moving = io::read_cloud(&args.moving, cfg.default_variance)?;
    let dim = args.dim as usize;
    for (name, cloud) in [("fixed", &fixed), ("moving", &moving)] {
        if cloud.dim() != dim {
            return Err(CliError::data(format!(
                "{name} cloud is {}D but --dim is {dim}",
                cloud.dim()
            )));
        }
    }
    let (json, report, summary) = match (&fixed, &moving) {
        (AnyCloud::Planar(f), AnyCloud::Planar(m)) => {
            let (report, json) = register_dim(f, m, &cfg)?;
            (json, report_csv(&report), (report.iterations, report.termination))
        }
        (AnyCloud::Spatial(f), AnyCloud::Spatial(m)) => {
            let (report, json) = register_dim(f, m, &cfg)?;
            (json, report_csv(&report), (report.iterations, report.termination))
        }
        _ => unreachable!("dimensions checked above"),
    };
    io::write_file(&out_transform, &json)?;
    io::write_file(&out_report, &report)?;
    Ok(format!("iterations {} ({:?})\n", summary.0, summary.1))
}

fn synth_dim<const D: usize>(
    model: &CovPointCloud<D>,
    spec: &PerturbationSpec,
) -> CliResult<(String, String, String)> {
    let pair = bench::perturb(model, spec)?;
    Ok((
        io::cloud_to_csv(&pair.fixed),
        io::cloud_to_csv(&pair.moving),
        io::transform_to_json(&pair.registration_truth()),
    ))
}

pub fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", prefix.display()))
}

/// The written gt transform maps the moving file onto the fixed file, the
/// same direction as `register`'s output.
pub fn synth(args: &SynthArgs) -> CliResult<String> {
    let spec = PerturbationSpec {
        occlusion_rate: args.occlusion,
        sample_rate_fixed: args.sample_fixed,
        sample_rate_moving: args.sample_moving,
        noise_std_max: args.noise_std,
        outlier_rate: args.outliers,
        outlier_cov_factor: args.outlier_cov_factor,
        init_rotation_deg: args.rotation_deg,
        translation_fraction: args.translation,
        seed: args.seed,
    };
    spec.validate()?;
    let model = io::read_cloud(&args.model, args.default_variance)?;
    let (fixed, moving, gt) = match &model {
        AnyCloud::Planar(m) => synth_dim(m, &spec)?,
        AnyCloud::Spatial(m) => synth_dim(m, &spec)?,
    };
    let paths = [
        prefixed(&args.out_prefix, "_fixed.csv"),
        prefixed(&args.out_prefix, "_moving.csv"),
        prefixed(&args.out_prefix, "_gt.json"),
    ];
    for (path, text) in paths.iter().zip([&fixed, &moving, &gt]) {
        io::write_file(path, text)?;
    }
    Ok(format!(
        "wrote {}, {}, {}\n",
        paths[0].display(),
        paths[1].display(),
        paths[2].display()
    ))
}

pub fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::usage(format!("bad grid {text:?}; use start:stop:step or a,b,c"));
    let number = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (number(a)?, number(b)?, number(step)?);
            if !(step > 0.0) || b < a {
                return Err(bad());
            }
            Ok(bench::grid(a, b, step))
        }
        [list] => list.split(',').map(number).collect(),
        _ => Err(bad()),
    }
}

pub fn parse_methods(text: &str) -> CliResult<Vec<Method>> {
    let mut methods = Vec::new();
    for name in text.split(',') {
        let m: Method = name.trim().parse().map_err(|e: agmm_core::Error| CliError::usage(e.to_string()))?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    Ok(methods)
}

/// Model files in `dir`, sorted by name.
pub fn read_dataset(dir: &Path, default_variance: f64) -> CliResult<Vec<AnyCloud>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("csv") || e.eq_ignore_ascii_case("ply"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::data(format!("{}: no .csv or .ply models", dir.display())));
    }
    let clouds: Vec<AnyCloud> = paths
        .iter()
        .map(|p| io::read_cloud(p, default_variance))
        .collect::<CliResult<_>>()?;
    if let Some((i, c)) = clouds.iter().enumerate().find(|(_, c)| c.dim() != clouds[0].dim()) {
        return Err(CliError::data(format!(
            "{} is {}D but {} is {}D",
            paths[i].display(),
            c.dim(),
            paths[0].display(),
            clouds[0].dim()
        )));
    }
    Ok(clouds)
}

pub fn sweep_csv(results: &[TrialResult], timing: bool) -> String {
    let mut out = String::from("method,variable,value,trial,rotation_error,translation_error,wall_time,seed\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.variable,
            fmt_num(r.value),
            r.trial,
            fmt_num(r.rotation_error),
            fmt_num(r.translation_error),
            if timing { fmt_num(r.wall_time) } else { "0".to_string() },
            r.seed
        );
    }
    out
}

pub fn sweep(args: &SweepArgs) -> CliResult<String> {
    let variable: SweepVariable = args
        .variable
        .parse()
        .map_err(|e: agmm_core::Error| CliError::usage(e.to_string()))?;
    let grid = match &args.grid {
        Some(text) => parse_grid(text)?,
        None => variable.default_grid(),
    };
    let methods = parse_methods(&args.methods)?;
    if args.trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let dataset = read_dataset(&args.dataset, args.default_variance)?;
    let dim = dataset[0].dim();
    let mut setup = SweepSetup::new(variable, dim, args.seed);
    setup.grid = grid;
    setup.trials_per_value = args.trials;
    setup.methods = methods;
    setup.base_spec.sample_rate_fixed = args.sample_fixed;
    setup.base_spec.sample_rate_moving = args.sample_moving;
    setup.base_spec.translation_fraction = args.translation;
    setup.base_spec.outlier_cov_factor = args.outlier_cov_factor;
    setup.base_spec.validate()?;

    let results = if dim == 2 {
        let models: Vec<CovPointCloud<2>> = dataset
            .into_iter()
            .filter_map(|c| match c {
                AnyCloud::Planar(c) => Some(c),
                AnyCloud::Spatial(_) => None,
            })
            .collect();
        bench::run_sweep(&models, &setup)?
    } else {
        let models: Vec<CovPointCloud<3>> = dataset
            .into_iter()
            .filter_map(|c| match c {
                AnyCloud::Spatial(c) => Some(c),
                AnyCloud::Planar(_) => None,
            })
            .collect();
        bench::run_sweep(&models, &setup)?
    };
    let summary = bench::summarize(&results);
    let csv = sweep_csv(&results, args.timing);
    let svg = plot::line_chart(&summary, variable.name());
    io::write_file(&args.out_csv, &csv)?;
    io::write_file(&args.out_svg, &svg)?;

    let mut text = String::new();
    for row in &summary {
        let _ = writeln!(
            text,
            "{:<5} {:>10} mean {:.6} std {:.6}",
            row.method.name(),
            fmt_num(row.value),
            row.mean,
            row.std
        );
    }
    Ok(text)
}

fn eval_dim<const D: usize>(gt: &RigidTransform<D>, est: &RigidTransform<D>) -> CliResult<(f64, f64)> {
    let rot = rotation_error(&gt.rotation_matrix(), &est.rotation_matrix())?;
    Ok((rot, (gt.translation() - est.translation()).norm()))
}

pub fn eval(args: &EvalArgs) -> CliResult<String> {
    let gt = io::read_transform(&args.gt)?;
    let est = io::read_transform(&args.est)?;
    let (rot, trans) = match (&gt, &est) {
        (AnyTransform::Planar(g), AnyTransform::Planar(e)) => eval_dim(g, e)?,
        (AnyTransform::Spatial(g), AnyTransform::Spatial(e)) => eval_dim(g, e)?,
        _ => return Err(CliError::data("gt and est have different dimensions")),
    };
    Ok(format!("rotation_error {rot:.6}\ntranslation_error {trans:.6}\n"))
}

pub fn generate(args: &GenerateArgs) -> CliResult<String> {
    if args.points < 4 {
        return Err(CliError::usage("--points must be at least 4"));
    }
    if !(args.variance > 0.0 && args.variance.is_finite()) {
        return Err(CliError::usage("--variance must be positive"));
    }
    let mut files: Vec<(String, String)> = Vec::new();
    let named = |name: &str, pts| -> CliResult<(String, String)> {
        let cloud = CovPointCloud::isotropic(pts, args.variance)?;
        Ok((format!("{name}.csv"), io::cloud_to_csv(&cloud)))
    };
    match args.shape {
        ShapeChoice::Fish => files.push(named("fish", shapes::fish(args.points))?),
        ShapeChoice::Ellipse => files.push(named("ellipse", shapes::ellipse(args.points))?),
        ShapeChoice::Box => files.push(named("box", shapes::box_with_bump(args.points))?),
        ShapeChoice::Random => {
            let models = shapes::contour_dataset(args.count, args.points, args.variance, args.seed)?;
            for (i, c) in models.iter().enumerate() {
                files.push((format!("contour_{i:03}.csv"), io::cloud_to_csv(c)));
            }
        }
        ShapeChoice::Blob => {
            let models = shapes::blob_dataset(args.count, args.points, args.variance, args.seed)?;
            for (i, c) in models.iter().enumerate() {
                files.push((format!("blob_{i:03}.csv"), io::cloud_to_csv(c)));
            }
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::data(format!("{}: {e}", args.out.display())))?;
    for (name, text) in &files {
        io::write_file(&args.out.join(name), text)?;
    }
    Ok(format!("wrote {} models to {}\n", files.len(), args.out.display()))
}
