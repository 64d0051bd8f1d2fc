//! Certified branch-and-bound over keypoint assignments.

pub mod continuous;
pub mod lap;

mod bnb;
mod oracle;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesics::CandidateSet;
use crate::model::{Assignment, MatchProblem, Reconstruction};

pub use bnb::{solve, solve_with_observer};
pub use continuous::{Context, Duals, FixedSolution};
pub use oracle::{count_assignments, exhaustive_oracle, ORACLE_LIMIT};

pub const DEFAULT_TIME_BUDGET_SECS: f64 = 3600.0;
pub const DEFAULT_GAP_THRESHOLD: f64 = 1e-2;
pub const DEFAULT_CONTINUOUS_TOLERANCE: f64 = 1e-6;

/// Both bounds at or below this count as a zero-objective instance.
pub const ZERO_OBJECTIVE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchingRule {
    /// Unfixed source with the fewest remaining candidates, ties by index.
    #[default]
    MinCandidates,
    /// Lowest unfixed source index.
    Lexicographic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub time_budget_secs: f64,
    pub gap_threshold: f64,
    pub continuous_tolerance: f64,
    pub branching: BranchingRule,
    pub workers: usize,
    pub seed: u64,
    /// Primal-dual iterations for the root relaxation.
    pub root_iterations: usize,
    /// Primal-dual iterations for nodes at depth `1..=relax_depth`.
    pub node_iterations: usize,
    pub relax_depth: usize,
    /// Random restarts of the swap local search for the first incumbent.
    pub restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            time_budget_secs: DEFAULT_TIME_BUDGET_SECS,
            gap_threshold: DEFAULT_GAP_THRESHOLD,
            continuous_tolerance: DEFAULT_CONTINUOUS_TOLERANCE,
            branching: BranchingRule::MinCandidates,
            workers: 1,
            seed: 0,
            root_iterations: 1500,
            node_iterations: 200,
            relax_depth: 1,
            restarts: 4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("time_budget_secs", self.time_budget_secs),
            ("gap_threshold", self.gap_threshold),
            ("continuous_tolerance", self.continuous_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.workers == 0 {
            return Err(Error::Validation("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    TimeBudgetExceeded,
    Infeasible,
}

/// One entry of the anytime trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t_secs: f64,
    pub upper: f64,
    pub lower: f64,
    pub gap: f64,
    pub nodes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub nodes: u64,
    pub wall_secs: f64,
    pub continuous_iterations: u64,
    pub continuous_solves: u64,
    /// Nodes whose relaxation fell back to the trivial bound.
    pub fallback_bounds: u64,
    pub max_depth: usize,
    pub trace: Vec<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct MatchSolution {
    pub assignment: Assignment,
    pub reconstruction: Reconstruction,
    pub upper_bound: f64,
    pub lower_bound: f64,
    pub rel_gap: f64,
    pub status: SolveStatus,
    pub stats: SolveStats,
}

impl MatchSolution {
    pub fn objective(&self) -> f64 {
        self.upper_bound
    }

    pub(crate) fn infeasible(problem: &MatchProblem, stats: SolveStats) -> Self {
        MatchSolution {
            assignment: Assignment(vec![None; problem.n_x()]),
            reconstruction: Reconstruction::identity(problem),
            upper_bound: f64::INFINITY,
            lower_bound: f64::INFINITY,
            rel_gap: 0.0,
            status: SolveStatus::Infeasible,
            stats,
        }
    }
}

/// `|(upper − lower)/upper|`, with 0 when both bounds vanish.
pub fn relative_gap(upper: f64, lower: f64) -> f64 {
    if upper.abs() <= ZERO_OBJECTIVE && lower.abs() <= ZERO_OBJECTIVE {
        return 0.0;
    }
    if upper == lower {
        return 0.0;
    }
    if upper == 0.0 {
        return f64::INFINITY;
    }
    ((upper - lower) / upper).abs()
}

/// Exact continuous solve for a fixed assignment at relative tolerance `tol`.
pub fn solve_continuous(problem: &MatchProblem, assignment: &Assignment, tol: f64) -> Result<FixedSolution> {
    let ctx = Context::new(problem);
    continuous::solve_fixed(problem, &ctx, assignment, tol)
}

/// Result of the relaxation over doubly stochastic matrices.
#[derive(Debug, Clone)]
pub struct RelaxedSolution {
    pub p: DMatrix<f64>,
    /// Objective of the relaxed iterate.
    pub value: f64,
    /// Certified lower bound on the relaxation (and on every assignment).
    pub lower: f64,
}

/// Relaxed continuous problem over the candidate-restricted Birkhoff polytope.
pub fn solve_relaxation(problem: &MatchProblem, iterations: usize) -> Result<RelaxedSolution> {
    continuous::full_mode_only(problem)?;
    let ctx = Context::new(problem);
    let n = ctx.n;
    let support = continuous::Support {
        n,
        mask: (0..n * n).map(|k| problem.candidates.allows(k / n, k % n)).collect(),
    };
    let allowed = |i: usize, j: usize| support.allows(i, j);
    let zero = Duals { zx: DMatrix::zeros(n, 3), zy: DMatrix::zeros(n, 3), w: nalgebra::DVector::zeros(n) };
    if ctx.lap_bound(&zero, allowed).is_none() {
        return Err(Error::NoFeasibleCompletion);
    }
    let relax = continuous::Relaxation::new(&ctx);
    let mut state = relax.initial_state(&ctx, &support);
    relax.run(&ctx, &support, &mut state, iterations);
    let mut duals = relax.duals(&ctx, &state);
    duals.push(continuous::duals_at(problem, &ctx, &state.p));
    let lower = duals
        .iter()
        .filter_map(|d| ctx.lap_bound(d, allowed).map(|b| b.0))
        .fold(0.0f64, f64::max);
    let value = continuous::relaxed_value(problem, &ctx, &state.p);
    Ok(RelaxedSolution { p: state.p, value, lower })
}

/// Maximum-weight feasible assignment on `relaxed` restricted to candidates.
/// Ties are broken towards the lexicographically smallest (row, column)
/// choice. Partial mode leaves rows unmatched where no positive weight exists.
pub fn round_to_assignment(relaxed: &DMatrix<f64>, candidates: &CandidateSet, partial: bool) -> Result<Assignment> {
    let n = candidates.num_sources();
    if relaxed.nrows() != n || relaxed.ncols() != candidates.num_targets {
        return Err(Error::Validation(format!(
            "relaxed matrix is {}x{}, candidates are {}x{}",
            relaxed.nrows(),
            relaxed.ncols(),
            n,
            candidates.num_targets
        )));
    }
    if partial {
        let rows = lap::max_weight_partial_matching(relaxed, |i, j| candidates.allows(i, j));
        return Ok(Assignment(rows));
    }
    let cost = -relaxed;
    let scale = relaxed.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-12 * scale * n.max(1) as f64;
    let (_, best) = lap::min_cost_assignment(&cost, |i, j| candidates.allows(i, j)).ok_or(Error::NoFeasibleCompletion)?;
    let mut fixed: Vec<Option<usize>> = vec![None; n];
    let mut used = vec![false; candidates.num_targets];
    for i in 0..n {
        for &j in &candidates.lists[i] {
            if used[j] {
                continue;
            }
            fixed[i] = Some(j);
            let ok = lap::min_cost_assignment(&cost, |r, c| match fixed[r] {
                Some(f) => f == c,
                None => candidates.allows(r, c) && !(used[c] || fixed.contains(&Some(c))),
            })
            .is_some_and(|(_, v)| v <= best + tol);
            if ok {
                used[j] = true;
                break;
            }
            fixed[i] = None;
        }
        if fixed[i].is_none() {
            return Err(Error::NoFeasibleCompletion);
        }
    }
    Ok(Assignment(fixed))
}
