use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparse_match::io::{file_hash, write_off, xyz_string};
use sparse_match::mesh::{Geometry, Point, Shape};
use sparse_match::model::{Assignment, Reconstruction};
use sparse_match::solver::{MatchSolution, SolveStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

pub fn hash_inputs(inputs: &[(&str, &Path)]) -> Result<Vec<InputHash>> {
    inputs
        .iter()
        .map(|(role, path)| {
            Ok(InputHash { role: role.to_string(), path: path.display().to_string(), sha256: file_hash(path)? })
        })
        .collect()
}

/// `# input <role> <path> sha256=<hex>` lines.
pub fn hash_header(inputs: &[InputHash]) -> String {
    inputs.iter().map(|h| format!("# input {} {} sha256={}\n", h.role, h.path, h.sha256)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsOut {
    pub nodes: u64,
    pub wall_secs: f64,
    pub continuous_iterations: u64,
    pub continuous_solves: u64,
    pub fallback_bounds: u64,
    pub max_depth: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub assignment: Vec<Option<usize>>,
    pub objective: Option<f64>,
    pub lower_bound: Option<f64>,
    pub rel_gap: f64,
    pub status: SolveStatus,
    pub stats: StatsOut,
    pub x_hat_path: Option<String>,
    pub y_hat_path: Option<String>,
    pub inputs: Vec<InputHash>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Point> {
    (0..m.nrows()).map(|i| Point::new(m[(i, 0)], m[(i, 1)], m[(i, 2)])).collect()
}

/// Deformed geometry reusing the input connectivity; XYZ for point clouds.
fn write_deformed(shape: &Shape, vertices: &nalgebra::DMatrix<f64>, stem: &Path, header: &str) -> Result<PathBuf> {
    let pts = rows(vertices);
    let (path, body) = match shape.geometry() {
        Geometry::Mesh(m) => {
            let text = write_off(&pts, m.faces());
            let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
            (stem.with_extension("off"), format!("{first}\n{header}{rest}"))
        }
        Geometry::Cloud(_) => (stem.with_extension("xyz"), format!("{header}{}", xyz_string(&pts))),
    };
    write_text(&path, &body)?;
    Ok(path)
}

pub fn write_reconstruction(
    dir: &Path,
    shape_x: &Shape,
    shape_y: &Shape,
    rec: &Reconstruction,
    inputs: &[InputHash],
) -> Result<(PathBuf, PathBuf)> {
    let header = hash_header(inputs);
    let x = write_deformed(shape_x, &rec.x_hat, &dir.join("x_hat"), &header)?;
    let y = write_deformed(shape_y, &rec.y_hat, &dir.join("y_hat"), &header)?;
    Ok((x, y))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes `solution.json` and the reconstructions into `dir`.
pub fn write_solution(dir: &Path, shape_x: &Shape, shape_y: &Shape, sol: &MatchSolution, inputs: &[InputHash]) -> Result<SolutionFile> {
    let paths = if sol.status == SolveStatus::Infeasible {
        None
    } else {
        Some(write_reconstruction(dir, shape_x, shape_y, &sol.reconstruction, inputs)?)
    };
    let file = SolutionFile {
        assignment: sol.assignment.0.clone(),
        objective: finite(sol.upper_bound),
        lower_bound: finite(sol.lower_bound),
        rel_gap: sol.rel_gap,
        status: sol.status,
        stats: StatsOut {
            nodes: sol.stats.nodes,
            wall_secs: sol.stats.wall_secs,
            continuous_iterations: sol.stats.continuous_iterations,
            continuous_solves: sol.stats.continuous_solves,
            fallback_bounds: sol.stats.fallback_bounds,
            max_depth: sol.stats.max_depth,
        },
        x_hat_path: paths.as_ref().map(|p| file_name(&p.0)),
        y_hat_path: paths.as_ref().map(|p| file_name(&p.1)),
        inputs: inputs.to_vec(),
    };
    write_json(&dir.join("solution.json"), &file)?;
    Ok(file)
}

/// A solution JSON, a JSON array, or text with one target index per line
/// (`-` for unmatched).
pub fn load_assignment(path: &Path) -> Result<Assignment> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let sol: SolutionFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(Assignment(sol.assignment));
    }
    if trimmed.starts_with('[') {
        let v: Vec<Option<usize>> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(Assignment(v));
    }
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let l = line.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        if l == "-" {
            out.push(None);
            continue;
        }
        match l.parse::<usize>() {
            Ok(j) => out.push(Some(j)),
            Err(_) => bail!("{}:{}: expected a keypoint index or '-', got {l:?}", path.display(), ln + 1),
        }
    }
    Ok(Assignment(out))
}

/// Solution metadata when `path` is a solution JSON.
pub fn load_solution_meta(path: &Path) -> Option<SolutionFile> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}
