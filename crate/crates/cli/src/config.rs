use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sparse_match::io::LoadOptions;
use sparse_match::model::{ProblemOptions, Weights};
use sparse_match::solver::SolverConfig;

/// Everything a run depends on, after merging file and flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub weights: Weights,
    pub problem: ProblemOptions,
    pub load: LoadOptions,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub shape_x: Option<PathBuf>,
    #[arg(long)]
    pub shape_y: Option<PathBuf>,
    /// Defaults to `<shape-x>.kp.txt` next to the shape.
    #[arg(long)]
    pub keypoints_x: Option<PathBuf>,
    #[arg(long)]
    pub keypoints_y: Option<PathBuf>,
    /// TOML file with `[solver]`, `[weights]`, `[problem]` and `[load]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub time_budget: Option<f64>,
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda_def: Option<f64>,
    #[arg(long)]
    pub lambda_ori: Option<f64>,
    #[arg(long)]
    pub partial: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.time_budget {
            cfg.solver.time_budget_secs = v;
        }
        if let Some(v) = self.gap {
            cfg.solver.gap_threshold = v;
        }
        if let Some(v) = self.workers {
            cfg.solver.workers = v;
        }
        if let Some(v) = self.seed {
            cfg.solver.seed = v;
        }
        if let Some(v) = self.k {
            cfg.problem.k = v;
        }
        if let Some(v) = self.lambda_def {
            cfg.weights.lambda_def = v;
        }
        if let Some(v) = self.lambda_ori {
            cfg.weights.lambda_ori = v;
        }
        if self.partial {
            cfg.problem.partial = true;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        cfg.solver.validate()?;
        cfg.weights.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl RunConfig {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("run"))
    }
}
