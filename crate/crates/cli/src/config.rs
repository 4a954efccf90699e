//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use agmm_core::em::RegistrationConfig;

use crate::error::{CliError, CliResult};
use crate::io::fmt_num;

pub const DEFAULT_VARIANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub registration: RegistrationConfig,
    /// Variance of the isotropic covariance given to points without one.
    pub default_variance: f64,
    pub seed: u64,
    pub out_transform: Option<PathBuf>,
    pub out_report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            default_variance: DEFAULT_VARIANCE,
            seed: 0,
            out_transform: None,
            out_report: None,
        }
    }
}

const KEYS: [&str; 10] = [
    "max_iters",
    "energy_rel_tol",
    "param_abs_tol",
    "sigma_floor",
    "cutoff",
    "inner_max_iters",
    "default_variance",
    "seed",
    "out_transform",
    "out_report",
];

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("line {line}: bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Unknown or repeated keys are errors; absent keys keep their defaults.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::usage(format!("line {line}: unknown key {key:?}")));
            }
            if seen.contains(&key) {
                return Err(CliError::usage(format!("line {line}: {key} given twice")));
            }
            seen.push(key);
            let r = &mut cfg.registration;
            match key {
                "max_iters" => r.max_iters = parse_value(line, key, value)?,
                "energy_rel_tol" => r.energy_rel_tol = parse_value(line, key, value)?,
                "param_abs_tol" => r.param_abs_tol = parse_value(line, key, value)?,
                "sigma_floor" => r.sigma_floor = parse_value(line, key, value)?,
                "cutoff" => r.cutoff = parse_value(line, key, value)?,
                "inner_max_iters" => r.inner_max_iters = parse_value(line, key, value)?,
                "default_variance" => cfg.default_variance = parse_value(line, key, value)?,
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "out_transform" => cfg.out_transform = Some(PathBuf::from(value)),
                "out_report" => cfg.out_report = Some(PathBuf::from(value)),
                _ => unreachable!("checked against KEYS"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.registration.validate()?;
        if !(self.default_variance > 0.0 && self.default_variance.is_finite()) {
            return Err(CliError::usage(format!(
                "default_variance must be positive, got {}",
                self.default_variance
            )));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let r = &self.registration;
        let mut out = String::new();
        let _ = writeln!(out, "max_iters = {}", r.max_iters);
        let _ = writeln!(out, "energy_rel_tol = {}", fmt_num(r.energy_rel_tol));
        let _ = writeln!(out, "param_abs_tol = {}", fmt_num(r.param_abs_tol));
        let _ = writeln!(out, "sigma_floor = {}", fmt_num(r.sigma_floor));
        let _ = writeln!(out, "cutoff = {}", fmt_num(r.cutoff));
        let _ = writeln!(out, "inner_max_iters = {}", r.inner_max_iters);
        let _ = writeln!(out, "default_variance = {}", fmt_num(self.default_variance));
        let _ = writeln!(out, "seed = {}", self.seed);
        if let Some(p) = &self.out_transform {
            let _ = writeln!(out, "out_transform = {}", p.display());
        }
        if let Some(p) = &self.out_report {
            let _ = writeln!(out, "out_report = {}", p.display());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn parses_all_keys() {
        let text = "# run\nmax_iters=7\nenergy_rel_tol = 1e-9\nparam_abs_tol=1e-7\nsigma_floor=0.01\ncutoff = inf\ninner_max_iters=3\ndefault_variance=0.002\nseed=99\nout_transform=a/b.json\nout_report = r.csv\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.registration.max_iters, 7);
        assert_eq!(cfg.registration.cutoff, f64::INFINITY);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.out_report, Some(PathBuf::from("r.csv")));
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_lines() {
        for text in ["bogus=1", "max_iters", "max_iters=x", "seed=1\nseed=2", "default_variance=0", "cutoff=-1"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.kind.exit_code(), 2, "{text}");
        }
    }

    proptest! {
        #[test]
        fn round_trip(
            max_iters in 1usize..1000,
            tol in 1e-12..1.0f64,
            floor in 0.0..1.0f64,
            cutoff in prop_oneof![Just(f64::INFINITY), 0.5..20.0f64],
            variance in 1e-12..1.0f64,
            seed in any::<u64>(),
            out in proptest::option::of("[a-z]{1,8}\\.json"),
        ) {
            let mut cfg = RunConfig::default();
            cfg.registration.max_iters = max_iters;
            cfg.registration.energy_rel_tol = tol;
            cfg.registration.sigma_floor = floor;
            cfg.registration.cutoff = cutoff;
            cfg.default_variance = variance;
            cfg.seed = seed;
            cfg.out_transform = out.map(PathBuf::from);
            let once = RunConfig::parse(&cfg.serialize()).unwrap();
            prop_assert_eq!(&once, &cfg);
            prop_assert_eq!(RunConfig::parse(&once.serialize()).unwrap(), once);
        }
    }
}
