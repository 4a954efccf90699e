//! Point-cloud and transform files.
//!
//! Clouds are CSV with a header `x,y[,z]`, optionally followed by the upper
//! triangle of each point's covariance (`c11,c12,c22` or
//! `c11,c12,c13,c22,c23,c33`). Lines starting with `#` are comments. ASCII
//! PLY files are read as points only.

use std::fs;
use std::path::Path;

use agmm_core::{CovPointCloud, Error as CoreError, Matrix, RigidTransform, Vector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// A cloud whose dimension is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCloud {
    Planar(CovPointCloud<2>),
    Spatial(CovPointCloud<3>),
}

impl AnyCloud {
    pub fn dim(&self) -> usize {
        match self {
            AnyCloud::Planar(_) => 2,
            AnyCloud::Spatial(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyCloud::Planar(c) => c.len(),
            AnyCloud::Spatial(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn point_columns(dim: usize) -> &'static [&'static str] {
    if dim == 2 {
        &["x", "y"]
    } else {
        &["x", "y", "z"]
    }
}

fn cov_columns(dim: usize) -> &'static [&'static str] {
    if dim == 2 {
        &["c11", "c12", "c22"]
    } else {
        &["c11", "c12", "c13", "c22", "c23", "c33"]
    }
}

/// Reads a `.ply` file as points only, anything else as CSV.
pub fn read_cloud(path: &Path, default_variance: f64) -> CliResult<AnyCloud> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let is_ply = path
        .extension()
        .is_some_and(|ext| ext.eq_ignore_ascii_case("ply"));
    let parsed = if is_ply {
        parse_ply(&text, default_variance)
    } else {
        parse_cloud_csv(&text, default_variance)
    };
    parsed.map_err(|e| e.context(path.display()))
}

pub fn parse_cloud_csv(text: &str, default_variance: f64) -> CliResult<AnyCloud> {
    if !(default_variance > 0.0 && default_variance.is_finite()) {
        return Err(CliError::usage(format!(
            "default variance must be positive, got {default_variance}"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::data(format!("header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let dim = if header.iter().any(|h| h == "z") { 3 } else { 2 };
    let expected_points = point_columns(dim);
    let with_cov: Vec<&str> = expected_points.iter().chain(cov_columns(dim)).copied().collect();
    let has_cov = if header == expected_points {
        false
    } else if header == with_cov {
        true
    } else {
        return Err(CliError::data(format!(
            "header must be {} or {}, got {}",
            expected_points.join(","),
            with_cov.join(","),
            header.join(",")
        )));
    };
    let width = header.len();

    let mut points = Vec::new();
    let mut covs = Vec::new();
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::data(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(CliError::data(format!(
                "line {line}: expected {width} columns, found {}",
                record.len()
            )));
        }
        let values: Vec<f64> = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CliError::data(format!("line {line}: bad number {field:?}")))
            })
            .collect::<CliResult<_>>()?;
        points.push(values[..dim].to_vec());
        covs.push(if has_cov { Some(values[dim..].to_vec()) } else { None });
        lines.push(line);
    }

    let build = |dim: usize| -> (Vec<f64>, Vec<f64>) {
        let mut flat_p = Vec::new();
        let mut flat_c = Vec::new();
        for (p, c) in points.iter().zip(&covs) {
            flat_p.extend_from_slice(p);
            let mut m = vec![0.0; dim * dim];
            match c {
                Some(upper) => {
                    let mut k = 0;
                    for i in 0..dim {
                        for j in i..dim {
                            m[i * dim + j] = upper[k];
                            m[j * dim + i] = upper[k];
                            k += 1;
                        }
                    }
                }
                None => {
                    for i in 0..dim {
                        m[i * dim + i] = default_variance;
                    }
                }
            }
            flat_c.extend(m);
        }
        (flat_p, flat_c)
    };
    let (flat_p, flat_c) = build(dim);
    let cloud = if dim == 2 {
        assemble::<2>(&flat_p, &flat_c).map(AnyCloud::Planar)
    } else {
        assemble::<3>(&flat_p, &flat_c).map(AnyCloud::Spatial)
    }
    .map_err(|e| match e {
        CoreError::NotSpd { index } => CliError::data(format!(
            "line {}: covariance is not symmetric positive-definite",
            lines[index]
        )),
        other => other.into(),
    })?;
    Ok(cloud)
}

fn assemble<const D: usize>(flat_p: &[f64], flat_c: &[f64]) -> Result<CovPointCloud<D>, CoreError> {
    let points = flat_p.chunks(D).map(Vector::<D>::from_column_slice).collect();
    let covs = flat_c
        .chunks(D * D)
        .map(Matrix::<D>::from_row_slice)
        .collect();
    CovPointCloud::new(points, covs)
}

fn parse_ply(text: &str, default_variance: f64) -> CliResult<AnyCloud> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(CliError::data("line 1: missing ply magic"));
    }
    let mut vertices = None;
    let mut in_vertex = false;
    let mut properties: Vec<String> = Vec::new();
    let mut elements_before = 0usize;
    for (i, line) in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(CliError::data(format!("line {}: only ascii PLY is supported", i + 1)))
            }
            ["element", "vertex", n] => {
                vertices = Some(
                    n.parse::<usize>()
                        .map_err(|_| CliError::data(format!("line {}: bad vertex count", i + 1)))?,
                );
                in_vertex = true;
            }
            ["element", _, n] => {
                if vertices.is_none() && n.parse::<usize>().map_or(true, |n| n > 0) {
                    elements_before += 1;
                }
                in_vertex = false;
            }
            ["property", .., name] if in_vertex => properties.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = vertices.ok_or_else(|| CliError::data("PLY has no vertex element"))?;
    if elements_before > 0 {
        return Err(CliError::data("PLY vertex element must come first"));
    }
    let column = |name: &str| properties.iter().position(|p| p == name);
    let (x, y) = match (column("x"), column("y")) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(CliError::data("PLY vertices need x and y properties")),
    };
    let z = column("z");
    let dim = if z.is_some() { 3 } else { 2 };

    let mut flat_p = Vec::with_capacity(count * dim);
    let mut read = 0;
    for (i, line) in lines {
        if read == count {
            break;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let get = |k: usize| -> CliResult<f64> {
            words
                .get(k)
                .and_then(|w| w.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::data(format!("line {}: bad vertex row", i + 1)))
        };
        flat_p.push(get(x)?);
        flat_p.push(get(y)?);
        if let Some(z) = z {
            flat_p.push(get(z)?);
        }
        read += 1;
    }
    if read != count {
        return Err(CliError::data(format!("PLY declares {count} vertices, found {read}")));
    }
    let covs: Vec<f64> = (0..count)
        .flat_map(|_| {
            let mut m = vec![0.0; dim * dim];
            for i in 0..dim {
                m[i * dim + i] = default_variance;
            }
            m
        })
        .collect();
    let cloud = if dim == 2 {
        AnyCloud::Planar(assemble::<2>(&flat_p, &covs)?)
    } else {
        AnyCloud::Spatial(assemble::<3>(&flat_p, &covs)?)
    };
    Ok(cloud)
}

/// CSV text with point and covariance columns for every point.
pub fn cloud_to_csv<const D: usize>(cloud: &CovPointCloud<D>) -> String {
    let mut out = String::new();
    let header: Vec<&str> = point_columns(D).iter().chain(cov_columns(D)).copied().collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (p, c) in cloud.points().iter().zip(cloud.covariances()) {
        let mut fields: Vec<String> = p.iter().map(|&v| fmt_num(v)).collect();
        for i in 0..D {
            for j in i..D {
                fields.push(fmt_num(c[(i, j)]));
            }
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_cloud<const D: usize>(path: &Path, cloud: &CovPointCloud<D>) -> CliResult<()> {
    write_file(path, &cloud_to_csv(cloud))
}

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// On-disk rigid transform: `p ↦ R·p + t`, `R` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformFile {
    pub dim: usize,
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnyTransform {
    Planar(RigidTransform<2>),
    Spatial(RigidTransform<3>),
}

impl TransformFile {
    pub fn from_transform<const D: usize>(t: &RigidTransform<D>) -> Self {
        let r = t.rotation_matrix();
        Self {
            dim: D,
            rotation: (0..D).flat_map(|i| (0..D).map(move |j| r[(i, j)])).collect(),
            translation: t.translation().iter().copied().collect(),
        }
    }

    /// Validates shape, finiteness and orthonormality.
    pub fn to_transform(&self) -> CliResult<AnyTransform> {
        let d = self.dim;
        if d != 2 && d != 3 {
            return Err(CliError::data(format!("dim must be 2 or 3, got {d}")));
        }
        if self.rotation.len() != d * d || self.translation.len() != d {
            return Err(CliError::data(format!(
                "a {d}D transform needs {} rotation and {d} translation entries",
                d * d
            )));
        }
        if !self.rotation.iter().chain(&self.translation).all(|v| v.is_finite()) {
            return Err(CliError::data("transform has non-finite entries"));
        }
        Ok(if d == 2 {
            AnyTransform::Planar(RigidTransform::from_matrix(
                &Matrix::<2>::from_row_slice(&self.rotation),
                Vector::<2>::from_column_slice(&self.translation),
            )?)
        } else {
            AnyTransform::Spatial(RigidTransform::from_matrix(
                &Matrix::<3>::from_row_slice(&self.rotation),
                Vector::<3>::from_column_slice(&self.translation),
            )?)
        })
    }
}

pub fn transform_to_json<const D: usize>(t: &RigidTransform<D>) -> String {
    let mut text = serde_json::to_string_pretty(&TransformFile::from_transform(t)).expect("plain data");
    text.push('\n');
    text
}

pub fn read_transform(path: &Path) -> CliResult<AnyTransform> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let file: TransformFile = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    file.to_transform().map_err(|e| e.context(path.display()))
}
