use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geodesics::CandidateSet;
use crate::model::{Assignment, MatchProblem};

use super::continuous::{solve_fixed, Context};
use super::{relative_gap, Checkpoint, MatchSolution, SolveStats, SolveStatus};

pub const ORACLE_LIMIT: u64 = 1_000_000;
const ORACLE_TOLERANCE: f64 = 1e-8;

/// Number of feasible assignments, counting stops once `limit` is exceeded.
pub fn count_assignments(candidates: &CandidateSet, partial: bool, limit: u64) -> u64 {
    fn go(i: usize, c: &CandidateSet, partial: bool, used: &mut [bool], count: &mut u64, limit: u64) {
        if *count > limit {
            return;
        }
        if i == c.num_sources() {
            *count += 1;
            return;
        }
        for &j in &c.lists[i] {
            if !used[j] {
                used[j] = true;
                go(i + 1, c, partial, used, count, limit);
                used[j] = false;
            }
        }
        if partial {
            go(i + 1, c, partial, used, count, limit);
        }
    }
    let mut count = 0;
    go(0, candidates, partial, &mut vec![false; candidates.num_targets], &mut count, limit);
    count
}

fn enumerate(candidates: &CandidateSet, partial: bool) -> Vec<Assignment> {
    fn go(i: usize, c: &CandidateSet, partial: bool, used: &mut [bool], cur: &mut Vec<Option<usize>>, out: &mut Vec<Assignment>) {
        if i == c.num_sources() {
            out.push(Assignment(cur.clone()));
            return;
        }
        for &j in &c.lists[i] {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                go(i + 1, c, partial, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
        if partial {
            cur.push(None);
            go(i + 1, c, partial, used, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, candidates, partial, &mut vec![false; candidates.num_targets], &mut Vec::new(), &mut out);
    out
}

/// Solves the continuous problem for every feasible assignment.
pub fn exhaustive_oracle(problem: &MatchProblem) -> Result<MatchSolution> {
    let start = Instant::now();
    let count = count_assignments(&problem.candidates, problem.partial, ORACLE_LIMIT);
    if count > ORACLE_LIMIT {
        return Err(Error::TooLarge { limit: ORACLE_LIMIT });
    }
    let all = enumerate(&problem.candidates, problem.partial);
    let mut stats = SolveStats { nodes: all.len() as u64, ..Default::default() };
    if all.is_empty() {
        stats.wall_secs = start.elapsed().as_secs_f64();
        return Ok(MatchSolution::infeasible(problem, stats));
    }
    let ctx = Context::new(problem);
    let solved = all
        .par_iter()
        .map(|a| solve_fixed(problem, &ctx, a, ORACLE_TOLERANCE))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    let mut lower = f64::INFINITY;
    for (k, s) in solved.iter().enumerate() {
        if s.value < solved[best].value {
            best = k;
        }
        lower = lower.min(s.lower);
        stats.continuous_iterations += s.iterations as u64;
    }
    stats.continuous_solves = solved.len() as u64;
    let upper = solved[best].value;
    let lower = lower.max(0.0).min(upper);
    stats.wall_secs = start.elapsed().as_secs_f64();
    stats.trace.push(Checkpoint {
        t_secs: stats.wall_secs,
        upper,
        lower,
        gap: relative_gap(upper, lower),
        nodes: stats.nodes,
    });
    let assignment = all[best].clone();
    let reconstruction = solved.into_iter().nth(best).unwrap().reconstruction;
    Ok(MatchSolution {
        assignment,
        reconstruction,
        upper_bound: upper,
        lower_bound: lower,
        rel_gap: relative_gap(upper, lower),
        status: SolveStatus::Optimal,
        stats,
    })
}
