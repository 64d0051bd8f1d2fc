use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::model::{Assignment, MatchProblem};

use super::continuous::{self, duals_at, mix, Context, Duals, FixedSolution, PdhgState, Relaxation, Support};
use super::lap::{max_matching, max_weight_partial_matching, min_cost_assignment};
use super::{relative_gap, BranchingRule, Checkpoint, MatchSolution, SolveStats, SolveStatus, SolverConfig, ZERO_OBJECTIVE};

const KELLEY_ROUNDS: usize = 4;
const MIX_STEPS: usize = 12;

/// `None` free, `Some(None)` unmatched (partial mode), `Some(Some(j))` fixed.
type Fixing = Vec<Option<Option<usize>>>;

struct Node {
    id: u64,
    lb: f64,
    depth: usize,
    fixed: Fixing,
    duals: Option<Arc<Duals>>,
    pdhg: Option<Arc<PdhgState>>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // max-heap: smallest (lb, id) first
    fn cmp(&self, other: &Self) -> Ordering {
        other.lb.total_cmp(&self.lb).then(other.id.cmp(&self.id))
    }
}

struct Incumbent {
    assignment: Assignment,
    solution: FixedSolution,
}

#[derive(Default)]
struct Evaluation {
    lb: f64,
    infeasible: bool,
    leaf: bool,
    duals: Option<Arc<Duals>>,
    pdhg: Option<Arc<PdhgState>>,
    best: Option<(Assignment, FixedSolution)>,
    solves: u64,
    iterations: u64,
    fallback: bool,
}

impl Evaluation {
    fn offer(&mut self, assignment: Assignment, sol: FixedSolution) {
        self.solves += 1;
        self.iterations += sol.iterations as u64;
        if self.best.as_ref().is_none_or(|b| sol.value < b.1.value) {
            self.best = Some((assignment, sol));
        }
    }
}

struct Search<'a> {
    problem: &'a MatchProblem,
    config: &'a SolverConfig,
    ctx: Context,
    relax: Option<Relaxation>,
    start: Instant,
}

impl<'a> Search<'a> {
    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn out_of_time(&self) -> bool {
        self.elapsed() >= self.config.time_budget_secs
    }

    fn solve_fixed(&self, a: &Assignment) -> Option<FixedSolution> {
        continuous::solve_fixed(self.problem, &self.ctx, a, self.config.continuous_tolerance).ok()
    }

    fn allowed(&self, fixed: &Fixing, used: &[bool], i: usize, j: usize) -> bool {
        match fixed[i] {
            Some(f) => f == Some(j),
            None => self.problem.candidates.allows(i, j) && !used[j],
        }
    }

    fn used(&self, fixed: &Fixing) -> Vec<bool> {
        let mut used = vec![false; self.problem.n_y()];
        for j in fixed.iter().flatten().flatten() {
            used[*j] = true;
        }
        used
    }

    fn prunable(&self, lb: f64, upper: f64) -> bool {
        lb >= upper || lb > upper - self.config.gap_threshold * upper.abs()
    }

    fn evaluate(&self, fixed: &Fixing, depth: usize, parent: Option<&Node>, incumbent: Option<&Arc<Duals>>) -> Evaluation {
        if self.problem.partial {
            self.evaluate_partial(fixed, parent)
        } else {
            self.evaluate_full(fixed, depth, parent, incumbent)
        }
    }

    fn evaluate_full(&self, fixed: &Fixing, depth: usize, parent: Option<&Node>, incumbent: Option<&Arc<Duals>>) -> Evaluation {
        let n = self.ctx.n;
        let used = self.used(fixed);
        let allowed = |i: usize, j: usize| self.allowed(fixed, &used, i, j);
        let parent_lb = parent.map_or(0.0, |p| p.lb);
        let mut ev = Evaluation::default();

        if fixed.iter().all(Option::is_some) {
            let a = Assignment(fixed.iter().map(|f| f.unwrap()).collect());
            ev.leaf = true;
            match self.solve_fixed(&a) {
                Some(sol) => {
                    ev.lb = sol.lower.max(parent_lb);
                    ev.offer(a, sol);
                }
                None => ev.infeasible = true,
            }
            return ev;
        }

        let mut pool: Vec<Arc<Duals>> = Vec::new();
        if let Some(d) = parent.and_then(|p| p.duals.clone()) {
            pool.push(d);
        }
        if let Some(d) = incumbent {
            if !pool.iter().any(|p| Arc::ptr_eq(p, d)) {
                pool.push(d.clone());
            }
        }
        if pool.is_empty() {
            pool.push(Arc::new(Duals { zx: DMatrix::zeros(n, 3), zy: DMatrix::zeros(n, 3), w: DVector::zeros(n) }));
        }
        let mut best: Option<(f64, Vec<usize>, Arc<Duals>)> = None;
        for d in &pool {
            let Some((b, perm)) = self.ctx.lap_bound(d, allowed) else {
                ev.infeasible = true;
                return ev;
            };
            if best.as_ref().is_none_or(|x| b > x.0) {
                best = Some((b, perm, d.clone()));
            }
        }
        let (mut bound, mut perm, mut duals) = best.unwrap();

        let mut seen: Vec<Vec<usize>> = Vec::new();
        for _ in 0..KELLEY_ROUNDS {
            if seen.contains(&perm) {
                break;
            }
            seen.push(perm.clone());
            let a = Assignment::from_permutation(&perm);
            let Some(sol) = self.solve_fixed(&a) else { break };
            let fresh = sol.duals.clone().map(Arc::new);
            ev.offer(a, sol);
            let Some(fresh) = fresh else { break };
            let Some((b_new, perm_new)) = self.ctx.lap_bound(&fresh, allowed) else { break };
            let (b_mix, theta, perm_mix) = self.mix_search(&duals, &fresh, allowed);
            let before = bound;
            if b_new >= b_mix && b_new > bound {
                bound = b_new;
                perm = perm_new;
                duals = fresh;
            } else if b_mix > bound {
                bound = b_mix;
                perm = perm_mix;
                duals = Arc::new(mix(&duals, &fresh, theta));
            }
            if bound <= before + 1e-12 * before.abs().max(1e-300) {
                break;
            }
        }

        if let Some(relax) = &self.relax {
            let iterations = if depth == 0 { self.config.root_iterations } else { self.config.node_iterations };
            if depth <= self.config.relax_depth && iterations > 0 {
                let support = Support { n, mask: (0..n * n).map(|k| allowed(k / n, k % n)).collect() };
                let mut state = match parent.and_then(|p| p.pdhg.as_deref()) {
                    Some(s) => s.clone(),
                    None => relax.initial_state(&self.ctx, &support),
                };
                relax.run(&self.ctx, &support, &mut state, iterations);
                let mut cands = relax.duals(&self.ctx, &state);
                cands.push(duals_at(self.problem, &self.ctx, &state.p));
                for d in cands {
                    let d = Arc::new(d);
                    if let Some((b, p)) = self.ctx.lap_bound(&d, allowed) {
                        let (b_mix, theta, p_mix) = self.mix_search(&duals, &d, allowed);
                        if b >= b_mix && b > bound {
                            bound = b;
                            perm = p;
                            duals = d;
                        } else if b_mix > bound {
                            bound = b_mix;
                            perm = p_mix;
                            duals = Arc::new(mix(&duals, &d, theta));
                        }
                    }
                }
                if let Ok(a) = super::round_to_assignment(&state.p, &restricted(&self.problem.candidates, &allowed), false) {
                    if let Some(sol) = self.solve_fixed(&a) {
                        ev.offer(a, sol);
                    }
                }
                ev.iterations += iterations as u64;
                ev.pdhg = Some(Arc::new(state));
            }
        }
        if !seen.contains(&perm) {
            let a = Assignment::from_permutation(&perm);
            if let Some(sol) = self.solve_fixed(&a) {
                ev.offer(a, sol);
            }
        }
        if !bound.is_finite() {
            ev.fallback = true;
            bound = 0.0;
        }
        ev.lb = bound.max(parent_lb).max(0.0);
        ev.duals = Some(duals);
        ev
    }

    /// Golden-section search of the concave bound along `θ a + (1 − θ) b`.
    fn mix_search(&self, a: &Duals, b: &Duals, allowed: impl Fn(usize, usize) -> bool + Copy) -> (f64, f64, Vec<usize>) {
        let eval = |t: f64| self.ctx.lap_bound(&mix(a, b, t), allowed).unwrap_or((f64::NEG_INFINITY, Vec::new()));
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut x1 = hi - phi * (hi - lo);
        let mut x2 = lo + phi * (hi - lo);
        let mut f1 = eval(x1);
        let mut f2 = eval(x2);
        for _ in 0..MIX_STEPS {
            if f1.0 < f2.0 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + phi * (hi - lo);
                f2 = eval(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - phi * (hi - lo);
                f1 = eval(x1);
            }
        }
        if f1.0 >= f2.0 {
            (f1.0, x1, f1.1)
        } else {
            (f2.0, x2, f2.1)
        }
    }

    fn evaluate_partial(&self, fixed: &Fixing, parent: Option<&Node>) -> Evaluation {
        let p = self.problem;
        let used = self.used(fixed);
        let parent_lb = parent.map_or(0.0, |p| p.lb);
        let mut ev = Evaluation::default();
        let matched_fixed = fixed.iter().filter(|f| matches!(f, Some(Some(_)))).count();
        let free: Vec<usize> = (0..fixed.len()).filter(|&i| fixed[i].is_none()).collect();
        let adj: Vec<Vec<usize>> = free
            .iter()
            .map(|&i| p.candidates.lists[i].iter().copied().filter(|&j| !used[j]).collect())
            .collect();
        let (size, cols) = max_matching(&adj, p.n_y());
        let best_matched = matched_fixed + size;
        let bound = p.unmatched_penalty * (p.n_x() + p.n_y() - 2 * best_matched) as f64;

        let mut completion: Vec<Option<usize>> = fixed.iter().map(|f| f.flatten()).collect();
        for (r, &i) in free.iter().enumerate() {
            completion[i] = cols[r];
        }
        let a = Assignment(completion);
        if let Some(sol) = self.solve_fixed(&a) {
            if free.is_empty() {
                ev.leaf = true;
                ev.lb = sol.lower.max(parent_lb);
            }
            ev.offer(a, sol);
        } else if free.is_empty() {
            ev.infeasible = true;
            return ev;
        }
        if !ev.leaf {
            ev.lb = bound.max(parent_lb);
        }
        ev
    }

    fn branch_variable(&self, fixed: &Fixing) -> Option<usize> {
        let used = self.used(fixed);
        let free = (0..fixed.len()).filter(|&i| fixed[i].is_none());
        match self.config.branching {
            BranchingRule::Lexicographic => free.min(),
            BranchingRule::MinCandidates => free.min_by_key(|&i| {
                let count = self.problem.candidates.lists[i].iter().filter(|&&j| !used[j]).count();
                (count, i)
            }),
        }
    }

    fn children(&self, fixed: &Fixing) -> Vec<Fixing> {
        let Some(i) = self.branch_variable(fixed) else { return Vec::new() };
        let used = self.used(fixed);
        let mut out: Vec<Fixing> = self.problem.candidates.lists[i]
            .iter()
            .filter(|&&j| !used[j])
            .map(|&j| {
                let mut f = fixed.clone();
                f[i] = Some(Some(j));
                f
            })
            .collect();
        if self.problem.partial {
            let mut f = fixed.clone();
            f[i] = Some(None);
            out.push(f);
        }
        out
    }

    fn initial_incumbent(&self) -> Option<Incumbent> {
        let p = self.problem;
        let cands = &p.candidates;
        let mut best: Option<Incumbent> = None;
        let consider = |best: &mut Option<Incumbent>, a: Assignment| {
            if let Some(sol) = self.solve_fixed(&a) {
                if best.as_ref().is_none_or(|b| sol.value < b.solution.value) {
                    *best = Some(Incumbent { assignment: a, solution: sol });
                }
            }
        };
        if p.partial {
            consider(&mut best, Assignment(vec![None; p.n_x()]));
            let top = p.descriptor_cost.iter().fold(0.0f64, |a, &b| a.max(b)) + 1.0;
            let weight = p.descriptor_cost.map(|c| top - c);
            consider(&mut best, Assignment(max_weight_partial_matching(&weight, |i, j| cands.allows(i, j))));
            return best;
        }
        let (perm, _) = min_cost_assignment(&p.descriptor_cost, |i, j| cands.allows(i, j))?;
        consider(&mut best, Assignment::from_permutation(&perm));
        if self.out_of_time() || best.as_ref().is_some_and(|b| b.solution.value <= ZERO_OBJECTIVE) {
            return best;
        }
        best = best.map(|b| self.local_search(b));
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        for _ in 0..self.config.restarts {
            if self.out_of_time() {
                break;
            }
            let n = self.ctx.n;
            let mut order: Vec<usize> = (0..n * n).collect();
            order.shuffle(&mut rng);
            let noise = DMatrix::from_fn(n, n, |i, j| order[i * n + j] as f64);
            let Some((perm, _)) = min_cost_assignment(&noise, |i, j| cands.allows(i, j)) else { break };
            let Some(sol) = self.solve_fixed(&Assignment::from_permutation(&perm)) else { continue };
            let local = self.local_search(Incumbent { assignment: Assignment::from_permutation(&perm), solution: sol });
            if best.as_ref().is_none_or(|b| local.solution.value < b.solution.value) {
                best = Some(local);
            }
        }
        best
    }

    /// First-improvement pairwise swaps.
    fn local_search(&self, mut inc: Incumbent) -> Incumbent {
        let n = self.ctx.n;
        let cands = &self.problem.candidates;
        let mut improved = true;
        while improved && !self.out_of_time() {
            improved = false;
            for i1 in 0..n {
                for i2 in i1 + 1..n {
                    let (Some(j1), Some(j2)) = (inc.assignment.0[i1], inc.assignment.0[i2]) else { continue };
                    if !cands.allows(i1, j2) || !cands.allows(i2, j1) {
                        continue;
                    }
                    let mut a = inc.assignment.clone();
                    a.0[i1] = Some(j2);
                    a.0[i2] = Some(j1);
                    if let Some(sol) = self.solve_fixed(&a) {
                        if sol.value < inc.solution.value - 1e-12 * inc.solution.value.abs().max(1.0) {
                            inc = Incumbent { assignment: a, solution: sol };
                            improved = true;
                        }
                    }
                }
            }
        }
        inc
    }
}

fn restricted(cands: &crate::geodesics::CandidateSet, allowed: &impl Fn(usize, usize) -> bool) -> crate::geodesics::CandidateSet {
    crate::geodesics::CandidateSet {
        lists: (0..cands.num_sources())
            .map(|i| cands.lists[i].iter().copied().filter(|&j| allowed(i, j)).collect())
            .collect(),
        num_targets: cands.num_targets,
    }
}

/// Branch-and-bound to the configured gap or budget.
pub fn solve(problem: &MatchProblem, config: &SolverConfig) -> Result<MatchSolution> {
    solve_with_observer(problem, config, &mut |_| {})
}

/// As [`solve`], streaming every checkpoint to `observer`.
pub fn solve_with_observer(problem: &MatchProblem, config: &SolverConfig, observer: &mut dyn FnMut(&Checkpoint)) -> Result<MatchSolution> {
    config.validate()?;
    let start = Instant::now();
    let ctx = Context::new(problem);
    let mut search = Search { problem, config, ctx, relax: None, start };
    let mut stats = SolveStats::default();

    let feasible = problem.partial || {
        let (size, _) = max_matching(&problem.candidates.lists, problem.n_y());
        size == problem.n_x() && problem.n_x() == problem.n_y()
    };
    let incumbent = if feasible { search.initial_incumbent() } else { None };
    let Some(mut incumbent) = incumbent else {
        stats.wall_secs = search.elapsed();
        return Ok(MatchSolution::infeasible(problem, stats));
    };
    let mut incumbent_duals = incumbent.solution.duals.clone().map(Arc::new);

    let mut upper = incumbent.solution.value;
    let mut lower = 0.0f64;
    let mut closed = f64::INFINITY;
    let mut next_id = 0u64;
    let mut heap = BinaryHeap::new();
    let mut emit = |stats: &mut SolveStats, upper: f64, lower: f64, t: f64| {
        let cp = Checkpoint { t_secs: t, upper, lower, gap: relative_gap(upper, lower), nodes: stats.nodes };
        stats.trace.push(cp);
        observer(&cp);
    };
    emit(&mut stats, upper, lower, search.elapsed());

    let mut status = None;
    if upper <= ZERO_OBJECTIVE {
        lower = upper.max(0.0);
        status = Some(SolveStatus::Optimal);
    } else if search.out_of_time() {
        status = Some(SolveStatus::TimeBudgetExceeded);
    }

    if status.is_none() {
        if !problem.partial && config.root_iterations > 0 {
            search.relax = Some(Relaxation::new(&search.ctx));
        }
        let root_fixed: Fixing = vec![None; problem.n_x()];
        let ev = search.evaluate(&root_fixed, 0, None, incumbent_duals.as_ref());
        stats.nodes += 1;
        absorb(&mut stats, &ev);
        if let Some((a, sol)) = ev.best {
            if sol.value < upper {
                upper = sol.value;
                incumbent_duals = sol.duals.clone().map(Arc::new);
                incumbent = Incumbent { assignment: a, solution: sol };
            }
        }
        if ev.infeasible {
            closed = f64::INFINITY;
        } else if ev.leaf || search.prunable(ev.lb, upper) {
            closed = closed.min(ev.lb);
        } else {
            heap.push(Node { id: next_id, lb: ev.lb, depth: 0, fixed: root_fixed, duals: ev.duals, pdhg: ev.pdhg });
            next_id += 1;
        }
    }

    let mut last = (upper, lower);
    while status.is_none() {
        let frontier = heap.peek().map_or(f64::INFINITY, |n: &Node| n.lb);
        lower = lower.max(frontier.min(closed).min(upper)).max(0.0);
        if (upper, lower) != last {
            emit(&mut stats, upper, lower, search.elapsed());
            last = (upper, lower);
        }
        if relative_gap(upper, lower) < config.gap_threshold || heap.is_empty() {
            status = Some(SolveStatus::Optimal);
            break;
        }
        if search.out_of_time() {
            status = Some(SolveStatus::TimeBudgetExceeded);
            break;
        }
        let mut batch = Vec::new();
        while batch.len() < config.workers {
            let Some(node) = heap.pop() else { break };
            if search.prunable(node.lb, upper) {
                closed = closed.min(node.lb);
                continue;
            }
            batch.push(node);
        }
        if batch.is_empty() {
            continue;
        }
        let jobs: Vec<(usize, Fixing)> = batch
            .iter()
            .enumerate()
            .flat_map(|(b, node)| search.children(&node.fixed).into_iter().map(move |f| (b, f)))
            .collect();
        let snapshot = incumbent_duals.clone();
        let run = |(b, f): &(usize, Fixing)| {
            let parent = &batch[*b];
            search.evaluate(f, parent.depth + 1, Some(parent), snapshot.as_ref())
        };
        let results: Vec<Evaluation> = if config.workers > 1 {
            jobs.par_iter().map(run).collect()
        } else {
            jobs.iter().map(run).collect()
        };
        for ((b, fixed), ev) in jobs.into_iter().zip(results) {
            stats.nodes += 1;
            absorb(&mut stats, &ev);
            let depth = batch[b].depth + 1;
            stats.max_depth = stats.max_depth.max(depth);
            if let Some((a, sol)) = ev.best {
                if sol.value < upper {
                    upper = sol.value;
                    incumbent_duals = sol.duals.clone().map(Arc::new);
                    incumbent = Incumbent { assignment: a, solution: sol };
                }
            }
            if ev.infeasible {
                continue;
            }
            if ev.leaf || search.prunable(ev.lb, upper) {
                closed = closed.min(ev.lb);
                continue;
            }
            heap.push(Node { id: next_id, lb: ev.lb, depth, fixed, duals: ev.duals, pdhg: ev.pdhg });
            next_id += 1;
        }
        if upper <= ZERO_OBJECTIVE {
            lower = lower.max(upper.max(0.0));
        }
    }
    let status = status.unwrap();
    lower = lower.min(upper);
    if (upper, lower) != last {
        emit(&mut stats, upper, lower, search.elapsed());
    }
    stats.wall_secs = search.elapsed();
    log::info!(
        "solve finished: status {:?}, upper {upper:.6e}, lower {lower:.6e}, {} nodes, {:.3}s",
        status,
        stats.nodes,
        stats.wall_secs
    );
    Ok(MatchSolution {
        assignment: incumbent.assignment,
        reconstruction: incumbent.solution.reconstruction,
        upper_bound: upper,
        lower_bound: lower,
        rel_gap: relative_gap(upper, lower),
        status,
        stats,
    })
}

fn absorb(stats: &mut SolveStats, ev: &Evaluation) {
    stats.continuous_solves += ev.solves;
    stats.continuous_iterations += ev.iterations;
    stats.fallback_bounds += ev.fallback as u64;
}
